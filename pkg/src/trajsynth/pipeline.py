"""Stage runners, run manifest and output-directory lock for the command line pipeline."""

from __future__ import annotations

import csv
import errno
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import PipelineConfig
from .core import AffineMap, Dataset, Source, normalize, read_trajectories, write_trajectories

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK = ".trajsynth.lock"

STAGES = ("simulate", "ingest", "train-vae", "segment", "train-diff", "generate", "audit", "mitigate", "metrics",
          "report")
# what a stage's output is called in error messages
ARTIFACT_LABEL = {
    "data": "real dataset",
    "train-vae": "vae checkpoint",
    "segment": "segmentation index",
    "train-diff": "diffusion checkpoint",
    "generate": "synthetic trajectories",
    "audit": "audit report",
    "mitigate": "mitigation report",
    "metrics": "metrics report",
    "report": "report",
}


class MissingArtifactError(RuntimeError):
    """An upstream stage has not completed."""


class LockError(RuntimeError):
    """Another process holds the output directory."""


# --------------------------------------------------------------------------
# manifest and lock


@dataclass
class RunManifest:
    """Per-output-directory record of completed stages.

    Each entry maps a stage to the hash of the configuration and upstream
    entries it ran with, plus the artifact files it wrote (paths relative to
    the output directory).
    """

    root: Path
    config_hash: str = ""
    tool_version: str = __version__
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, root) -> "RunManifest":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            return cls(root)
        d = json.loads(path.read_text())
        return cls(root, d.get("config_hash", ""), d.get("tool_version", __version__), d.get("stages", {}))

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        d = {"config_hash": self.config_hash, "tool_version": self.tool_version, "stages": self.stages}
        tmp = self.root / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(d, indent=2, sort_keys=True))
        os.replace(tmp, self.root / MANIFEST)

    def complete(self, stage: str) -> bool:
        entry = self.stages.get(stage)
        if entry is None:
            return False
        return all((self.root / p).exists() for p in entry["artifacts"].values())

    def hash_of(self, stage: str) -> str | None:
        entry = self.stages.get(stage)
        return None if entry is None else entry["hash"]

    def path(self, stage: str, key: str) -> Path:
        return self.root / self.stages[stage]["artifacts"][key]

    def record(self, stage: str, stage_hash: str, artifacts: dict[str, str]) -> None:
        # an artifact file belongs to exactly one entry
        claimed = set(artifacts.values())
        for other, entry in self.stages.items():
            if other != stage and claimed & set(entry["artifacts"].values()):
                raise RuntimeError(f"stage {stage} would overwrite artifacts of {other}")
        self.stages[stage] = {"hash": stage_hash, "artifacts": dict(sorted(artifacts.items()))}


class OutputLock:
    """Single-writer lock file created with ``O_EXCL``; a lock left by a dead process is reclaimed."""

    def __init__(self, root):
        self.path = Path(root) / LOCK
        self.fd: int | None = None

    def _holder_alive(self) -> bool:
        try:
            pid = int(self.path.read_text().strip() or "0")
        except (OSError, ValueError):
            return False
        if pid <= 0:
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def __enter__(self) -> "OutputLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
                os.write(self.fd, str(os.getpid()).encode())
                return self
            except OSError as exc:
                if exc.errno != errno.EEXIST:
                    raise
                if self._holder_alive():
                    raise LockError(f"output directory {self.path.parent} is locked by another run ({self.path})")
                log.warning("removing stale lock %s", self.path)
                self.path.unlink(missing_ok=True)
        raise LockError(f"could not acquire {self.path}")

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
            self.path.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# stage context


@dataclass
class Context:
    cfg: PipelineConfig
    manifest: RunManifest

    @property
    def root(self) -> Path:
        return self.manifest.root

    def data_stage(self) -> str:
        return self.cfg["dataset"]["source"]

    def real(self, split: str = "train") -> Dataset:
        m = self.manifest
        stage = self.data_stage()
        amap = AffineMap.from_dict(json.loads(m.path(stage, "normalization").read_text()))
        return read_trajectories(m.path(stage, split), length=self.cfg.length, normalization=amap)

    def vae(self):
        from .vae import load_vae

        return load_vae(self.manifest.path("train-vae", "vae"))

    def index(self):
        from .segmentation import SegmentationIndex

        return SegmentationIndex.load(self.manifest.path("segment", "index"))

    def denoiser(self):
        from .diffusion import load_denoiser

        return load_denoiser(self.manifest.path("train-diff", "diffusion"))


def _resolve(ctx: Context, dep: str) -> str:
    return ctx.data_stage() if dep == "data" else dep


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _seed(cfg: PipelineConfig, *salt: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *salt]).generate_state(1)[0])


# --------------------------------------------------------------------------
# stages


def _split_and_write(ctx: Context, data: Dataset) -> dict[str, str]:
    if len(data) < 2:
        raise ValueError(f"dataset has {len(data)} trajectories; need at least 2")
    norm = normalize(data)
    rng = np.random.default_rng(_seed(ctx.cfg, 1))
    perm = rng.permutation(len(norm))
    n_hold = max(1, int(round(ctx.cfg["dataset"]["holdout_fraction"] * len(norm))))
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    write_trajectories(norm.subset(train), ctx.root / "data/train.csv")
    write_trajectories(norm.subset(hold), ctx.root / "data/holdout.csv")
    _write_json(ctx.root / "data/normalization.json", norm.normalization.to_dict())
    log.info("wrote %d training and %d held-out trajectories", len(train), len(hold))
    return {"train": "data/train.csv", "holdout": "data/holdout.csv", "normalization": "data/normalization.json"}


def stage_simulate(ctx: Context) -> dict[str, str]:
    from .datagen import simulate

    spec = ctx.cfg.world_spec()
    data = simulate(spec, spec.population)
    return _split_and_write(ctx, data)


def stage_ingest(ctx: Context) -> dict[str, str]:
    from .datagen import ingest_plt, preprocess

    ing = ctx.cfg["dataset"]["ingest"]
    logs = [g for p in ing["paths"] for g in ingest_plt(p)]
    data = preprocess(logs, tuple(ing["bbox"]), ing["window_minutes"], ctx.cfg.length)
    return _split_and_write(ctx, data)


def stage_train_vae(ctx: Context) -> dict[str, str]:
    from .vae import save_vae, train_vae

    model = train_vae(ctx.real("train"), ctx.cfg.vae_config(), log_every=10)
    save_vae(model, ctx.root / "models/vae.npz")
    return {"vae": "models/vae.npz"}


def stage_segment(ctx: Context) -> dict[str, str]:
    from .segmentation import build_tree, project_means

    real = ctx.real("train")
    index = build_tree(project_means(ctx.vae(), real), ctx.cfg["segmentation"]["depth"])
    index.save(ctx.root / "models/segmentation.json")
    log.info("%d latent cells at depth %d", len(index.cells), index.depth)
    return {"index": "models/segmentation.json"}


def stage_train_diff(ctx: Context) -> dict[str, str]:
    from .diffusion import save_denoiser, train_diffusion
    from .segmentation import conditions_for

    real = ctx.real("train")
    cond = conditions_for(ctx.index(), real.ids)
    model = train_diffusion(real.points, cond, ctx.cfg.diffusion_config(), log_every=10)
    save_denoiser(model, ctx.root / "models/diffusion.npz")
    return {"diffusion": "models/diffusion.npz"}


def _scale_tag(scale: float) -> str:
    return f"s{scale:g}".replace(".", "p")


def _generate_labeled(model, index, guidance, sampler: str, n: int, seed: int) -> Dataset:
    """``n`` samples with conditions drawn in proportion to cell membership; ids name the cell."""
    from .diffusion import sample
    from .metrics import draw_cells
    from .segmentation import condition_vector

    occupied, pick = draw_cells(index, n, np.random.default_rng(seed))
    table = np.stack([condition_vector(c) for c in occupied])
    pts = sample(model, table[pick], guidance, sampler, seed=seed, n=n)
    ids = tuple(f"c{occupied[p].cell_id}-{k}" for k, p in enumerate(pick))
    return Dataset(pts, ids, (Source.SYNTHETIC,) * n)


def stage_generate(ctx: Context) -> dict[str, str]:
    model, index = ctx.denoiser(), ctx.index()
    cfg = ctx.cfg
    out = {}
    for k, scale in enumerate(cfg["guidance"]["scales"]):
        syn = _generate_labeled(model, index, cfg.guidance(scale), cfg["guidance"]["sampler"],
                                cfg["generation"]["n_samples"], _seed(cfg, 2, k))
        rel = f"synthetic/generated_{_scale_tag(scale)}.csv"
        write_trajectories(syn, ctx.root / rel)
        out[_scale_tag(scale)] = rel
    return out


def _audit_cells(ctx: Context, index) -> list:
    occupied = [c for c in index.cells if c.member_ids]
    cap = ctx.cfg["privacy"]["max_conditions"]
    if cap is not None and cap < len(occupied):
        occupied = sorted(occupied, key=lambda c: (-len(c.member_ids), c.cell_id))[:cap]
        occupied.sort(key=lambda c: c.cell_id)
    return occupied


def _members(real: Dataset, cell) -> np.ndarray:
    where = real.index_of()
    return real.points[[where[t] for t in cell.member_ids]]


def stage_audit(ctx: Context) -> dict[str, str]:
    from .privacy import audit_condition, diffusion_generator
    from .segmentation import condition_vector

    cfg = ctx.cfg
    model, index, real = ctx.denoiser(), ctx.index(), ctx.real("train")
    test = cfg.memorization_test()
    guidance = cfg.guidance()
    rows = []
    for cell in _audit_cells(ctx, index):
        gen = diffusion_generator(model, condition_vector(cell), guidance, cfg["guidance"]["sampler"])
        a = audit_condition(cell.cell_id, gen, _members(real, cell), test, _seed(cfg, 3, cell.cell_id))
        log.info("condition %d (%d members): %s", cell.cell_id, a.members, a.flag.value)
        d = a.to_dict()
        d["seeds"] = a.seeds.tolist()
        rows.append(d)
    _write_json(ctx.root / "privacy/audit.json", {"test": test.to_dict(), "guidance_scale": guidance.scale,
                                                  "conditions": rows})
    return {"audit": "privacy/audit.json"}


def load_audits(path) -> list:
    from .privacy import ConditionAudit, Flag, MemorizationTest

    d = json.loads(Path(path).read_text())
    test = MemorizationTest(**d["test"])
    return [
        ConditionAudit(r["cell_id"], test, np.asarray(r["generated"], dtype=np.int64),
                       np.asarray(r["memorized"], dtype=np.int64), np.asarray(r["seeds"], dtype=np.int64),
                       Flag(r["flag"]), r["reason"], r["members"])
        for r in d["conditions"]
    ]


def stage_mitigate(ctx: Context) -> dict[str, str]:
    from .lipschitz import local_lipschitz_condition
    from .privacy import Flag, ball_laplace_mitigate, diffusion_generator, mitigate_and_reaudit
    from .segmentation import condition_vector

    cfg = ctx.cfg
    p = cfg["privacy"]
    model, index, real = ctx.denoiser(), ctx.index(), ctx.real("train")
    guidance = cfg.guidance()
    audits = load_audits(ctx.manifest.path("audit", "audit"))
    cells = {c.cell_id: c for c in index.cells}
    todo = [a for a in audits if a.flag != Flag.CLEAR and a.reason != "singleton"]
    rtol = 1e-6 if p["lipschitz_mode"] == "per_step_max" else 1e-2
    estimates = {}
    for a in todo:
        est = local_lipschitz_condition(model, cells[a.cell_id], guidance, p["lipschitz_samples"],
                                        _seed(cfg, 4, a.cell_id), p["lipschitz_mode"], p["lipschitz_iters"],
                                        adjoint_rtol=rtol)
        estimates[a.cell_id] = est
        log.info("condition %d: L = %.4g", a.cell_id, est.L_value)
    gens = {a.cell_id: diffusion_generator(model, condition_vector(cells[a.cell_id]), guidance,
                                           cfg["guidance"]["sampler"]) for a in todo}
    reals = {a.cell_id: _members(real, cells[a.cell_id]) for a in todo}
    report = mitigate_and_reaudit(audits, gens, reals, cells, {k: e.L_value for k, e in estimates.items()},
                                  p["i"], _seed(cfg, 5))
    report.lipschitz = [estimates[k].to_dict() for k in sorted(estimates)]
    report.save(ctx.root / "privacy/mitigation.json")
    report.write_boxplot_csv(ctx.root / "privacy/memorization_boxplot.csv")

    # perturb the released synthetic set condition by condition
    deltas = {r.cell_id: r.delta for r in report.rows if r.mitigated}
    tag = _scale_tag(guidance.scale)
    syn = read_trajectories(ctx.manifest.path("generate", tag), length=cfg.length)
    pts = np.array(syn.points)
    cell_of = np.array([int(t.split("-")[0][1:]) for t in syn.ids])
    for cid in sorted(deltas):
        sel = np.flatnonzero(cell_of == cid)
        if sel.size:
            pts[sel] = ball_laplace_mitigate(pts[sel], deltas[cid], _seed(cfg, 6, cid))
    sources = tuple(Source.PERTURBED if c in deltas else Source.SYNTHETIC for c in cell_of)
    write_trajectories(Dataset(pts, syn.ids, sources), ctx.root / "synthetic/mitigated.csv")
    log.info("flagged before %d, after %d", report.flagged_before, report.flagged_after)
    return {"report": "privacy/mitigation.json", "boxplot": "privacy/memorization_boxplot.csv",
            "mitigated": "synthetic/mitigated.csv"}


def stage_metrics(ctx: Context) -> dict[str, str]:
    from .metrics import bootstrap_generator, conditional_generator, run_protocol

    cfg = ctx.cfg
    m = cfg["metrics"]
    settings = cfg.metric_settings()
    holdout, train = ctx.real("holdout"), ctx.real("train")
    model, index = ctx.denoiser(), ctx.index()
    reports = [run_protocol(bootstrap_generator(train), holdout, m["n_runs"], m["n_samples"], _seed(cfg, 7),
                            settings, "real")]
    for k, scale in enumerate(cfg["guidance"]["scales"]):
        gen = conditional_generator(model, index, cfg.guidance(scale), cfg["guidance"]["sampler"])
        reports.append(run_protocol(gen, holdout, m["n_runs"], m["n_samples"], _seed(cfg, 8, k), settings,
                                    f"model {_scale_tag(scale)}"))
    _write_json(ctx.root / "metrics/metrics.json", {"reports": [r.to_dict() for r in reports]})
    return {"metrics": "metrics/metrics.json"}


def _audit_report_from_json(d: dict):
    from .privacy import AuditReport, ConditionReport, Flag, MemorizationTest

    rows = [
        ConditionReport(r["cell_id"], Flag(r["flag"]), r["reason"], np.asarray(r["memorized_before"]),
                        np.asarray(r["memorized_after"]), Flag(r["flag_after"]), r["mitigated"], r["delta"],
                        r["lipschitz_L"], r["i"])
        for r in d["conditions"]
    ]
    return AuditReport(MemorizationTest(**d["test"]), rows, d.get("lipschitz", []))


def _audit_only_report(path):
    from .privacy import AuditReport, ConditionReport

    audits = load_audits(path)
    rows = [ConditionReport(a.cell_id, a.flag, a.reason, a.memorized, a.memorized.copy(), a.flag, False)
            for a in audits]
    return AuditReport(audits[0].test if audits else None, rows)


def _plot_boxplot(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = sorted({r["stage"] for r in rows}, key=["before", "after"].index)
    fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 4), squeeze=False, sharey=True)
    for ax, stage in zip(axes[0], stages):
        sel = [r for r in rows if r["stage"] == stage]
        stats = [{"label": f"{r['B']:g}", "med": r["median"], "q1": r["q1"], "q3": r["q3"], "whislo": r["min"],
                  "whishi": r["max"], "mean": r["mean"], "fliers": []} for r in sel]
        ax.bxp(stats, showmeans=True)
        ax.plot(range(1, len(sel) + 1), [r["threshold"] for r in sel], "r--", label="flag threshold")
        ax.set_title(f"memorized samples ({stage} mitigation)")
        ax.set_xlabel("upsampling factor B")
    axes[0][0].set_ylabel("memorized count per condition")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_metrics(reports, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import METRICS

    fig, axes = plt.subplots(2, 4, figsize=(14, 6))
    for ax, name in zip(axes.ravel(), METRICS):
        labels = [r.label for r in reports]
        means = [r.mean(name) if r.mean(name) is not None else np.nan for r in reports]
        stds = [r.std(name) if r.std(name) is not None else 0.0 for r in reports]
        ax.bar(range(len(labels)), means, yerr=stds, color="tab:blue")
        ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=8)
        ax.set_title(name, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_samples(real: Dataset, syn: Dataset, path: Path, n: int = 100) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 5), sharex=True, sharey=True)
    for ax, data, title in ((axes[0], real, "held-out real"), (axes[1], syn, "generated")):
        for pts in data.points[:n]:
            ax.plot(pts[:, 0], pts[:, 1], lw=0.5, alpha=0.6)
        ax.set_title(title)
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stage_report(ctx: Context) -> dict[str, str]:
    from .metrics import MetricReport, format_table

    m = ctx.manifest
    d = json.loads(m.path("metrics", "metrics").read_text())
    reports = [MetricReport.from_dict(r) for r in d["reports"]]
    table = format_table(reports)
    out = ctx.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics_table.txt").write_text(table + "\n")
    if m.complete("mitigate"):
        audit = _audit_report_from_json(json.loads(m.path("mitigate", "report").read_text()))
    else:
        audit = _audit_only_report(m.path("audit", "audit"))
    rows = audit.boxplot_rows() if audit.rows else []
    if not m.complete("mitigate"):
        rows = [r for r in rows if r["stage"] == "before"]
    if rows:
        with open(out / "memorization_boxplot.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        _plot_boxplot(rows, out / "memorization_boxplot.png")
    _plot_metrics(reports, out / "metrics.png")
    tag = _scale_tag(ctx.cfg["guidance"]["scales"][0])
    syn = read_trajectories(m.path("generate", tag), length=ctx.cfg.length)
    _plot_samples(ctx.real("holdout"), syn, out / "samples.png")
    summary = {
        "metrics": [r.to_dict() for r in reports],
        "privacy": {
            "conditions_audited": len(audit.rows),
            "flagged_before": audit.flagged_before if audit.rows else 0,
            "flagged_after": audit.flagged_after if audit.rows else 0,
            "mitigated": m.complete("mitigate"),
        },
    }
    _write_json(out / "report.json", summary)
    print(table)
    arts = {"table": "report/metrics_table.txt", "summary": "report/report.json", "metrics_plot": "report/metrics.png",
            "samples_plot": "report/samples.png"}
    if rows:
        arts["boxplot_csv"] = "report/memorization_boxplot.csv"
        arts["boxplot_plot"] = "report/memorization_boxplot.png"
    return arts


# --------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class Stage:
    run: Callable[[Context], dict[str, str]]
    upstream: tuple[str, ...]
    sections: tuple[str, ...]
    optional: tuple[str, ...] = ()


REGISTRY: dict[str, Stage] = {
    "simulate": Stage(stage_simulate, (), ("dataset",)),
    "ingest": Stage(stage_ingest, (), ("dataset",)),
    "train-vae": Stage(stage_train_vae, ("data",), ("vae",)),
    "segment": Stage(stage_segment, ("train-vae", "data"), ("segmentation",)),
    "train-diff": Stage(stage_train_diff, ("segment", "data"), ("diffusion",)),
    "generate": Stage(stage_generate, ("train-diff", "segment"), ("guidance", "generation")),
    "audit": Stage(stage_audit, ("train-diff", "segment", "data"), ("guidance", "privacy")),
    "mitigate": Stage(stage_mitigate, ("audit", "generate", "train-diff", "segment", "data"), ("guidance", "privacy")),
    "metrics": Stage(stage_metrics, ("train-diff", "segment", "data"), ("guidance", "metrics")),
    "report": Stage(stage_report, ("metrics", "audit", "generate", "data"), (), ("mitigate",)),
}


def pipeline_order(cfg: PipelineConfig) -> list[str]:
    """All stages in execution order, with the configured data source."""
    return [cfg["dataset"]["source"]] + [s for s in STAGES[2:]]


def stage_hash(ctx: Context, name: str) -> str:
    stage = REGISTRY[name]
    parts = [name, ctx.cfg.section_hash(*stage.sections)]
    for dep in stage.upstream + stage.optional:
        parts.append(ctx.manifest.hash_of(_resolve(ctx, dep)) or "")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def check_upstream(ctx: Context, name: str) -> None:
    if name in ("simulate", "ingest") and name != ctx.data_stage():
        raise MissingArtifactError(
            f"stage {name} does not match dataset.source={ctx.data_stage()!r}; run `trajsynth {ctx.data_stage()}`")
    missing = []
    for dep in REGISTRY[name].upstream:
        stage = _resolve(ctx, dep)
        if not ctx.manifest.complete(stage):
            missing.append(f"missing artifact: {ARTIFACT_LABEL[dep]} (run `trajsynth {stage}` first)")
    if missing:
        raise MissingArtifactError("\n".join(missing))


def run_stage(cfg: PipelineConfig, name: str, force: bool = False, root=None) -> bool:
    """Run one stage under the output lock; returns ``False`` when it was already up to date."""
    if name not in REGISTRY:
        raise ValueError(f"unknown stage {name!r}")
    root = Path(root) if root is not None else cfg.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    with OutputLock(root):
        manifest = RunManifest.load(root)
        ctx = Context(cfg, manifest)
        check_upstream(ctx, name)
        h = stage_hash(ctx, name)
        if not force and manifest.hash_of(name) == h and manifest.complete(name):
            log.info("%s: up to date", name)
            return False
        artifacts = REGISTRY[name].run(ctx)
        manifest.config_hash = cfg.hash()
        manifest.record(name, h, artifacts)
        manifest.save()
        log.info("%s: done", name)
        return True
