"""Experiment runner behind the command line: single runs, K and lambda
sweeps, bank audits and exports for external plotting."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax
from scipy.stats import spearmanr

from . import bankio
from .collapse import CollapseReport, detect_partial_collapse, reassign_to_unique, unique_count_curve
from .config import ExperimentConfig, load_config
from .errors import NonFiniteLoss
from .geometry import l2_normalize
from .head import head_logits, mlcd
from .regularizers import PriorDistribution, me_max_penalty
from .trainer import (
    StepMetrics,
    embed_dataset,
    make_bank,
    make_dataset,
    mean_pairwise_cosine_distance,
    purity,
    train,
)

VARIANTS = ("baseline", "kd", "kp")
ABLATION_COLUMNS = ("K", "variant", "final_M", "final_mlcd_entropy", "purity")
LAMBDA_COLUMNS = ("lambda", "final_M", "final_mlcd_entropy", "purity")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _entropy(p: np.ndarray) -> float:
    return float(-np.sum(p * np.log(np.maximum(p, 1e-30))))


def write_metrics(path, history: list[StepMetrics]) -> None:
    bankio.atomic_write_text(path, _csv_text(StepMetrics.FIELDS, [m.row() for m in history]))


def save_params(path, params) -> None:
    buf = io.BytesIO()
    np.savez(buf, **params)
    bankio.atomic_write_bytes(path, buf.getvalue())


def load_params(path) -> dict[str, np.ndarray]:
    with np.load(path) as f:
        return {k: f[k] for k in f.files}


@dataclass
class RunResult:
    out_dir: Path
    report: CollapseReport
    summary: dict


def summarize(cfg: ExperimentConfig, params, protos, report: CollapseReport, data) -> dict:
    """Whole-dataset statistics of a trained student with prototype weights ``protos``."""
    y = embed_dataset(params, data.points)
    bank = make_bank({**params, "protos": protos}, cfg)
    probs = np.exp(log_softmax(head_logits(bank, y, cfg.temperature.student), axis=1))
    p_bar = mlcd(probs)
    prior = PriorDistribution(cfg.mlcd.prior, bank.K, cfg.mlcd.prior_alpha)
    reps = l2_normalize(protos)[report.representatives]

    # reassigned mass per representative at the final (sharpest settled) teacher temperature
    mass = mlcd(reassign_to_unique(bank, report, y, cfg.temperature.teacher_end))
    rho = None
    if report.M > 2 and len(set(report.redundancy)) > 1:
        rho = float(spearmanr(report.redundancy, mass).statistic)
    return {
        "steps": cfg.optim.steps,
        "final_M": report.M,
        "final_mlcd_entropy": _entropy(p_bar),
        "max_mlcd_entropy": float(np.log(bank.K)),
        "kl_to_prior": me_max_penalty(p_bar, prior),
        "purity": purity(y, reps, data.labels),
        "mean_pairwise_cosine_distance": mean_pairwise_cosine_distance(y),
        "representative_mass": [float(m) for m in mass],
        "redundancy_mass_spearman": rho,
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Train ``cfg`` and write metrics, report, bank and resolved config to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.run.output_dir)
    if out_dir is not None:
        cfg = cfg.replace(run={"output_dir": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    bankio.atomic_write_text(out / "config.toml", cfg.to_toml())

    data = make_dataset(cfg)
    history: list[StepMetrics] = []
    try:
        state, _ = train(cfg, data, callback=history.append)
    except NonFiniteLoss as exc:
        write_metrics(out / "metrics.csv", history)
        bankio.atomic_write_text(out / "failure.json", _json_text({"error": str(exc), "step": len(history) + 1}))
        raise

    write_metrics(out / "metrics.csv", state.history)
    # the report is computed from the float32 weights actually stored on disk
    stored = bankio.as_stored(state.student["protos"])
    bankio.write_pbank(out / "prototypes.pbank", state.student["protos"])
    save_params(out / "student.npz", state.student)
    report = detect_partial_collapse(l2_normalize(stored), cfg.run.epsilon)
    summary = summarize(cfg, state.student, stored, report, data)
    bankio.atomic_write_text(out / "report.json", _json_text({"collapse": report.to_dict(), "summary": summary}))
    return RunResult(out, report, summary)


# -- sweeps --------------------------------------------------------------------------


def variant_config(base: ExperimentConfig, K: int, variant: str, out_dir) -> ExperimentConfig:
    kind = {"baseline": "none", "kd": "data", "kp": "proto"}[variant]
    return base.replace(head={"num_prototypes": K}, koleo={"kind": kind}, run={"output_dir": str(out_dir)})


def _run_row(cfg: ExperimentConfig) -> dict:
    s = run_experiment(cfg).summary
    return {"final_M": s["final_M"], "final_mlcd_entropy": s["final_mlcd_entropy"], "purity": s["purity"]}


def worker_count() -> int:
    raw = os.environ.get("PROTO_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PROTO_LAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _sweep(jobs: list[tuple[tuple, ExperimentConfig]], csv_path: Path, header) -> list[list]:
    """Run ``jobs`` (key, config) and keep ``csv_path`` current after every completed job."""
    done: dict[int, list] = {}

    def flush():
        rows = [done[i] for i in sorted(done)]
        bankio.atomic_write_text(csv_path, _csv_text(header, rows))
        return rows

    def record(i, key, res):
        done[i] = [*key, res["final_M"], repr(res["final_mlcd_entropy"]), repr(res["purity"])]
        flush()

    workers = min(worker_count(), len(jobs))
    try:
        if workers == 1:
            for i, (key, cfg) in enumerate(jobs):
                record(i, key, _run_row(cfg))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_row, cfg) for _, cfg in jobs]
                for i, ((key, _), fut) in enumerate(zip(jobs, futures)):
                    record(i, key, fut.result())
    finally:
        rows = flush()
    return rows


def ablate_k(base: ExperimentConfig, k_list, variants=VARIANTS, out_dir=None) -> list[list]:
    k_list = [int(k) for k in k_list]
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("K values must be strictly ascending")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s): {', '.join(unknown)}")
    out = Path(out_dir if out_dir is not None else base.run.output_dir)
    jobs = [((K, v), variant_config(base, K, v, out / f"K{K}_{v}")) for K in k_list for v in variants]
    return _sweep(jobs, out / "ablation.csv", ABLATION_COLUMNS)


def ablate_lambda(base: ExperimentConfig, lambdas, out_dir=None) -> list[list]:
    """KoLeo-proto strength sweep at the base config's K."""
    out = Path(out_dir if out_dir is not None else base.run.output_dir)
    jobs = []
    for lam in lambdas:
        lam = float(lam)
        cfg = base.replace(koleo={"kind": "proto" if lam > 0 else "none", "weight": lam},
                           run={"output_dir": str(out / f"lambda_{lam:g}")})
        jobs.append(((repr(lam),), cfg))
    return _sweep(jobs, out / "lambda_ablation.csv", LAMBDA_COLUMNS)


# -- audit and export --------------------------------------------------------------------


def audit_bank(pbank_path, epsilons, out_dir=None) -> dict:
    raw = bankio.read_pbank(pbank_path)
    mu = l2_normalize(raw)
    levels = []
    for eps, M in unique_count_curve(mu, epsilons):
        rep = detect_partial_collapse(mu, eps)
        hist = np.bincount(rep.redundancy)
        levels.append({
            "epsilon": eps,
            "M": M,
            "redundancy_histogram": {str(r): int(c) for r, c in enumerate(hist) if c},
        })
    result = {"source": str(pbank_path), "K": raw.shape[0], "D": raw.shape[1], "levels": levels}
    out = Path(out_dir) if out_dir is not None else Path(pbank_path).parent / "audit"
    out.mkdir(parents=True, exist_ok=True)
    bankio.atomic_write_text(out / "report.json", _json_text(result))
    return result


def format_audit(result: dict) -> str:
    lines = [f"K={result['K']} D={result['D']}", f"{'epsilon':>10}  {'M':>6}"]
    lines += [f"{lv['epsilon']:>10g}  {lv['M']:>6d}" for lv in result["levels"]]
    return "\n".join(lines)


def export_run(run_dir) -> tuple[Path, Path]:
    """Dump student embeddings and prototypes of a finished run as CSV."""
    run = Path(run_dir)
    cfg = load_config(run / "config.toml")
    params = load_params(run / "student.npz")
    protos = bankio.read_pbank(run / "prototypes.pbank")
    report = CollapseReport.from_dict(json.loads((run / "report.json").read_text())["collapse"])
    data = make_dataset(cfg)

    y = embed_dataset(params, data.points)
    bank = make_bank({**params, "protos": protos}, cfg)
    latent = np.argmax(head_logits(bank, y, cfg.temperature.student), axis=1)
    D = y.shape[1]
    emb_rows = [[*map(repr, map(float, row)), int(lab), int(c)] for row, lab, c in zip(y, data.labels, latent)]
    emb_path = run / "embeddings.csv"
    bankio.atomic_write_text(
        emb_path, _csv_text([*(f"y{i}" for i in range(D)), "label", "latent_class"], emb_rows)
    )

    # a partition's redundancy factor sits on its representative's row, so the column sums to K
    mu = l2_normalize(protos)
    red = np.zeros(report.K, dtype=int)
    red[report.representatives] = report.redundancy
    proto_rows = [[*map(repr, map(float, row)), int(a) + 1, int(r)] for row, a, r in zip(mu, report.assignment, red)]
    proto_path = run / "prototypes.csv"
    bankio.atomic_write_text(
        proto_path, _csv_text([*(f"w{i}" for i in range(D)), "partition", "redundancy"], proto_rows)
    )
    return emb_path, proto_path
