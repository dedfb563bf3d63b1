"""
experiments.py — orchestration behind the CLI: load data, train, write the trace
CSV and JSON summaries.
"""
from __future__ import annotations

import logging
from pathlib import Path

from pydantic import BaseModel

from bcdtrain.baseline import sgd_train
from bcdtrain.config import (
    RunConfig,
    dump_config,
    get_settings,
    to_hyperparams,
    to_network_spec,
    to_sgd_config,
)
from bcdtrain.data import MNIST_FILES, Dataset, load_mnist_idx, synthetic_blobs, write_mnist_idx, write_trace_csv
from bcdtrain.diagnostics import TraceRecord, summarize, sufficient_descent_constant
from bcdtrain.oracles import ProxCheckReport, prox_check
from bcdtrain.solver import run_training
from bcdtrain.state import seed_streams

logger = logging.getLogger(__name__)


class RunSummary(BaseModel):
    final_total:        float
    final_train_acc:    float
    final_test_acc:     float
    epochs:             int
    descent_pass:       bool | None
    rate_pass:          bool | None
    residual_pass:      bool | None
    wall_seconds:       float
    descent_pass_count: int
    rate_checked:       bool
    config:             str

    @property
    def ok(self) -> bool:
        """No certificate that was checked came back false."""
        return self.descent_pass is not False and self.residual_pass is not False and \
            (self.rate_pass is not False or not self.rate_checked)


class CompareVerdict(BaseModel):
    bcd:           RunSummary
    sgd:           RunSummary
    bcd_train_acc: float
    sgd_train_acc: float
    bcd_beats_sgd: bool


# ── Data ───────────────────────────────────────────────────────────────────

def load_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Training split and optional held-out split, subsampled to data.n_train / data.n_test."""
    if cfg.data.source == "synthetic":
        syn = cfg.data.synthetic
        d0 = syn.d0 or cfg.net.dims[0]
        classes = syn.classes or cfg.net.dims[-1]
        full = synthetic_blobs(syn.n + syn.n_test, d0, classes, syn.spread, seed_streams(cfg.seed).data)
        train, test = full.split(syn.n)
    else:
        root = cfg.mnist_dir
        train = load_mnist_idx(root / MNIST_FILES["train_images"], root / MNIST_FILES["train_labels"])
        test = load_mnist_idx(root / MNIST_FILES["test_images"], root / MNIST_FILES["test_labels"])

    if cfg.data.n_train is not None:
        train = train.head(cfg.data.n_train)
    if cfg.data.n_test is not None:
        test = test.head(cfg.data.n_test)
    if test.n == 0:
        test = None
    logger.info(f"[data] {cfg.data.source}: n_train={train.n} | n_test={test.n if test else 0} | d0={train.d0}")
    return train, test


def _summary(trace: list[TraceRecord], cfg: RunConfig, verdict=None) -> RunSummary:
    last = trace[-1]
    return RunSummary(
        final_total        = last.objective.total,
        final_train_acc    = last.train_acc,
        final_test_acc     = last.test_acc,
        epochs             = last.epoch,
        descent_pass       = verdict.descent_pass if verdict else None,
        rate_pass          = verdict.rate_pass if verdict else None,
        residual_pass      = verdict.residual_pass if verdict else None,
        wall_seconds       = last.wall_seconds,
        descent_pass_count = verdict.descent_pass_count if verdict else 0,
        rate_checked       = verdict.rate_checked if verdict else False,
        config             = dump_config(cfg),
    )


def _write_outputs(prefix: str, trace: list[TraceRecord], summary: RunSummary,
                   cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, out_dir / f"{prefix}_trace.csv", wall_clock=cfg.output.wall_clock_in_csv)
    (out_dir / f"{prefix}_summary.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")


# ── Runs ───────────────────────────────────────────────────────────────────

def run_bcd(cfg: RunConfig, out_dir: Path | None = None) -> RunSummary:
    """
    Flow:
    1. Build the network and hyperparameters from the config
    2. Load (and subsample) the data
    3. Train; a descent violation raises DescentViolation when checks are on
    4. Replay the certificates over the trace and write CSV + JSON
    """

    # ── Step 1: Network + hyperparameters ─────────────────────────────
    spec = to_network_spec(cfg)
    hp = to_hyperparams(cfg)

    # ── Step 2: Data ──────────────────────────────────────────────────
    train, test = load_dataset(cfg)

    # ── Step 3: Training ──────────────────────────────────────────────
    trace = run_training(
        cfg.form, spec, train, hp, cfg.epochs,
        init_std  = cfg.bcd.init_std,
        init_bias = cfg.bcd.init_bias,
        test      = test,
        enforce   = cfg.bcd.check_descent,
    )

    # ── Step 4: Verdict + outputs ─────────────────────────────────────
    a = sufficient_descent_constant(hp, hp.risk_lipschitz(train.n, spec.dims[-1]))
    verdict = summarize(trace, cfg.form, hp, spec.N, a)
    summary = _summary(trace, cfg, verdict)
    _write_outputs("bcd", trace, summary, cfg, Path(out_dir or cfg.output_dir))
    logger.info(
        f"[bcd] done | total={summary.final_total:.6e} | train={summary.final_train_acc:.4f} | "
        f"descent {summary.descent_pass_count}/{summary.epochs} | rate={summary.rate_pass} | "
        f"residual={summary.residual_pass}"
    )
    return summary


def run_sgd(cfg: RunConfig, out_dir: Path | None = None) -> RunSummary:
    spec = to_network_spec(cfg)
    train, test = load_dataset(cfg)
    trace = sgd_train(spec, train, to_sgd_config(cfg),
                      init_std=cfg.bcd.init_std, init_bias=cfg.bcd.init_bias, test=test)
    summary = _summary(trace, cfg)
    _write_outputs("sgd", trace, summary, cfg, Path(out_dir or cfg.output_dir))
    logger.info(f"[sgd] done | risk={summary.final_total:.6e} | train={summary.final_train_acc:.4f}")
    return summary


def run_compare(cfg: RunConfig, out_dir: Path | None = None) -> CompareVerdict:
    """BCD and SGD from the same initial weights and data; writes compare.json."""
    out_dir = Path(out_dir or cfg.output_dir)
    bcd = run_bcd(cfg, out_dir)
    sgd = run_sgd(cfg, out_dir)
    verdict = CompareVerdict(
        bcd           = bcd,
        sgd           = sgd,
        bcd_train_acc = bcd.final_train_acc,
        sgd_train_acc = sgd.final_train_acc,
        bcd_beats_sgd = bcd.final_train_acc > sgd.final_train_acc,
    )
    (out_dir / "compare.json").write_text(verdict.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"[compare] bcd train={bcd.final_train_acc:.4f} | sgd train={sgd.final_train_acc:.4f} | "
                f"bcd_beats_sgd={verdict.bcd_beats_sgd}")
    return verdict


def gen_data(out_dir, *, n: int = 600, n_test: int = 200, d0: int = 784, classes: int = 10,
             spread: float = 0.1, seed: int = 0) -> dict[str, Path]:
    """Write synthetic blobs as the four MNIST-named IDX files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = synthetic_blobs(n + n_test, d0, classes, spread, seed_streams(seed).data)
    train, test = full.split(n)
    paths = {key: out_dir / name for key, name in MNIST_FILES.items()}
    write_mnist_idx(train, paths["train_images"], paths["train_labels"])
    write_mnist_idx(test, paths["test_images"], paths["test_labels"])
    logger.info(f"[gen-data] wrote {train.n} + {test.n} samples (d0={d0}, classes={classes}) to {out_dir}")
    return paths


def run_prox_check(cases: int | None = None, seed: int | None = None) -> ProxCheckReport:
    settings = get_settings()
    report = prox_check(cases if cases is not None else settings.prox_check_cases,
                        seed if seed is not None else settings.prox_check_seed)
    logger.info(f"[prox-check] {'PASS' if report.passed else 'FAIL'} over {len(report.suites)} suites")
    return report
