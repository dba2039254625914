"""Staged experiment runner.

Every stage reads its inputs from earlier stages' artifacts on disk and
writes under ``<out_dir>/<run_id>/<stage>/``. The run manifest records the
config hash, the artifacts of each finished stage and timestamps; it is the
only file allowed to differ between two runs of the same config.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from probekit import archive, augment, detector as det, diffusion, metrics, probe, toydata
from probekit import tensor as tn
from probekit.config import RunConfig
from probekit.errors import ConfigError, ContractError, DependencyError
from probekit.lora import save_lora
from probekit.seeding import derive_rng, derive_seed
from probekit.toydata import SplitDataset

__version__ = "0.1.0"

DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "gen-data": (),
    "pretrain-generator": ("gen-data",),
    "pretrain-variant-generator": ("gen-data",),
    "pretrain-detector": ("gen-data", "pretrain-generator"),
    "probe": ("pretrain-generator", "pretrain-detector"),
    "export-samples": ("gen-data", "probe"),
    "finetune-detector": ("pretrain-generator", "pretrain-detector", "export-samples"),
    "evaluate": ("gen-data", "pretrain-generator", "pretrain-variant-generator", "finetune-detector"),
    "sweep-robustness": ("gen-data", "pretrain-generator", "pretrain-variant-generator", "finetune-detector"),
    "analyze-spectrum": ("gen-data", "pretrain-generator", "pretrain-variant-generator", "export-samples"),
}
STAGES = tuple(DEPENDENCIES) + ("run-all",)


def topological_order() -> list[str]:
    order: list[str] = []
    state: dict[str, int] = {}

    def visit(name: str) -> None:
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise ContractError(f"dependency cycle through {name!r}")
        state[name] = 1
        for dep in DEPENDENCIES[name]:
            visit(dep)
        state[name] = 2
        order.append(name)

    for name in DEPENDENCIES:
        visit(name)
    return order


def explain() -> str:
    lines = []
    for name in topological_order():
        deps = DEPENDENCIES[name]
        lines.append(f"{name}  <-  {', '.join(deps) if deps else '(none)'}")
    lines.append(f"run-all  =  {' -> '.join(topological_order())}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run directory and manifest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class Run:
    config: RunConfig
    root: Path

    @classmethod
    def open(cls, config: RunConfig, out_dir=None) -> "Run":
        base = Path(out_dir if out_dir is not None else config["io"]["out_dir"])
        root = base / config.run_id
        run = cls(config, root)
        man = run.manifest()
        if man and man.get("config_hash") != config.hash():
            raise ConfigError(
                f"run {config.run_id!r} exists with a different config hash; refusing to overwrite"
            )
        if not man:
            root.mkdir(parents=True, exist_ok=True)
            (root / "config.ini").write_text(config.to_text())
            run._write_manifest(
                {
                    "run_id": config.run_id,
                    "config_hash": config.hash(),
                    "created_at": _now(),
                    "versions": {
                        "probekit": __version__,
                        "numpy": np.__version__,
                        "python": platform.python_version(),
                    },
                    "stages": {},
                }
            )
        return run

    @property
    def manifest_file(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_file.exists():
            return {}
        return json.loads(self.manifest_file.read_text())

    def _write_manifest(self, man: dict) -> None:
        archive.write_json(self.manifest_file, man)

    def path(self, stage: str, name: str) -> Path:
        p = self.root / stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def artifact(self, stage: str, name: str) -> Path:
        return self.root / stage / name

    def done(self, stage: str) -> bool:
        entry = self.manifest().get("stages", {}).get(stage)
        return bool(entry) and all((self.root / a).exists() for a in entry["artifacts"])

    def check_dependencies(self, stage: str) -> None:
        missing = [d for d in DEPENDENCIES[stage] if not self.done(d)]
        if missing:
            raise DependencyError(stage, missing)

    def record(self, stage: str, started: str) -> None:
        files = sorted(
            str(p.relative_to(self.root)) for p in (self.root / stage).rglob("*") if p.is_file()
        )
        man = self.manifest()
        man["stages"][stage] = {"artifacts": files, "started_at": started, "finished_at": _now()}
        self._write_manifest(man)


# ---------------------------------------------------------------------------
# helpers shared by stages


def schedule_of(cfg: RunConfig, variant: bool = False) -> diffusion.NoiseSchedule:
    g = cfg["generator"]
    beta_end = cfg["generator_variant"]["beta_end"] if variant else g["beta_end"]
    return diffusion.make_schedule(g["T"], g["beta_start"], beta_end, g["eta"])


def augment_policy(cfg: RunConfig) -> augment.AugmentPolicy:
    a = cfg["augment"]
    return augment.AugmentPolicy(
        quality_range=tuple(int(q) for q in a["quality_range"]),
        blur_sigma_range=a["blur_sigma_range"],
        noise_std_range=a["noise_std_range"],
        resize_scale_range=a["resize_scale_range"],
        brightness_range=a["brightness_range"],
        contrast_range=a["contrast_range"],
        flip=a["flip"],
        rotate=a["rotate"],
        crop=a["crop"],
        prob=a["prob"],
    )


def detector_config(cfg: RunConfig, seed: int) -> det.DetectorTrainConfig:
    d = cfg["detector"]
    return det.DetectorTrainConfig(
        lr=d["lr"], weight_decay=d["weight_decay"], batch=d["batch"], max_epochs=d["max_epochs"],
        patience=d["patience"], val_fraction=d["val_fraction"], seed=seed, policy=augment_policy(cfg),
    )


def mix_config(cfg: RunConfig, seed: int) -> det.MixConfig:
    d = cfg["detector"]
    return det.MixConfig(
        lr=d["ft_lr"], weight_decay=d["weight_decay"], batch=d["batch"], max_epochs=d["ft_max_epochs"],
        patience=d["patience"], val_fraction=d["val_fraction"], seed=seed, policy=augment_policy(cfg), w=d["w"],
    )


def probe_config(cfg: RunConfig, seed: int, **overrides) -> probe.ProbeConfig:
    p = cfg["probe"]
    kw = dict(
        lam=p["lam"], lr=p["lr"], momentum=p["momentum"], batch=p["batch"], n_prompts=p["n_prompts"],
        K=p["K"], t_s=p["t_s"], t_s_mode=p["t_s_mode"], rounds=p["rounds"], rank=p["rank"], alpha=p["alpha"],
        seed=seed, step_convention=p["step_convention"], grad_branches=p["grad_branches"],
        guidance=cfg["generator"]["guidance"], extractor_seed=derive_seed(cfg.seed, "extractor"),
    )
    kw.update(overrides)
    return probe.ProbeConfig(**kw)


def make_fakes(net, schedule, n: int, guidance: float, seed: int, purpose: str, tag: str, n_classes: int) -> SplitDataset:
    classes = np.arange(n) % n_classes
    seeds = np.array([derive_seed(seed, purpose, i) for i in range(n)], dtype=np.int64)
    pixels = diffusion.generate_images(net, schedule, classes, seeds, guidance)
    return SplitDataset(pixels, classes, np.ones(n, dtype=np.int64), [tag] * n, purpose, seed, {"seed": seeds})


def aggregate_samples(sources, n_total: int, seed: int) -> SplitDataset:
    """Equal draws from each source (remainder to earlier ones), then a seeded shuffle."""
    sources = list(sources)
    if not sources:
        raise ContractError("aggregate_samples needs at least one source")
    if len({s.pixels.shape[1:] for s in sources}) != 1:
        raise ContractError("sources differ in image dims")
    k = len(sources)
    quotas = [n_total // k + (1 if i < n_total % k else 0) for i in range(k)]
    parts = []
    for i, (src, q) in enumerate(zip(sources, quotas)):
        if len(src) < q:
            raise ContractError(f"source {i} has {len(src)} samples, fewer than its quota {q}")
        idx = np.sort(derive_rng(seed, "aggregate", i).permutation(len(src))[:q])
        parts.append(src.subset(idx))
    merged = SplitDataset.concat(parts, "aggregate")
    return merged.subset(derive_rng(seed, "aggregate", "shuffle").permutation(len(merged)))


def paired_with_reals(fakes: SplitDataset, fresh: SplitDataset, seed: int) -> SplitDataset:
    """Probe fakes plus an equal number of fresh reals (seeded subset)."""
    n = min(len(fakes), len(fresh))
    idx = np.sort(derive_rng(seed, "paired-reals").permutation(len(fresh))[:n])
    # concat keeps only the extra columns both parts share, i.e. none
    return SplitDataset.concat([fakes, fresh.subset(idx)], "paired")


def build_variant_generator(cfg: RunConfig, real: SplitDataset):
    g, v = cfg["generator"], cfg["generator_variant"]
    schedule = schedule_of(cfg, variant=True)
    tc = diffusion.DenoiserTrainConfig(
        steps=v["steps"], lr=v["lr"], batch=v["batch"], cond_drop=g["cond_drop"],
        seed=derive_seed(cfg.seed, "pretrain-variant-generator"), data_var=g["data_var"],
    )
    net, losses = diffusion.train_denoiser(real, schedule, tc, width=v["width"])
    return net, schedule, losses


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _load_critics(run: Run) -> list:
    n = run.config["detector"]["n_critics"]
    return [det.load_detector(run.artifact("pretrain-detector", f"critic_{k}.ptar")) for k in range(n)]


def _score_rows(rep, run_id, seed, name, detector, real, fakes_by_tag, stage="evaluate") -> None:
    p_real = det.predict_patched(detector, real.pixels)
    for tag, fakes in fakes_by_tag.items():
        p_fake = det.predict_patched(detector, fakes.pixels)
        scores = np.concatenate([p_real, p_fake])
        labels = np.r_[np.zeros(len(p_real)), np.ones(len(p_fake))]
        param = f"detector={name}"
        rep.add(run_id, stage, "test", tag, "bacc", metrics.balanced_accuracy(scores, labels), seed, param)
        rep.add(run_id, stage, "test", tag, "ap", metrics.average_precision(scores, labels), seed, param)
        rep.add(run_id, stage, "test", tag, "score_mean", float(p_fake.mean()), seed, param)


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(run: Run) -> None:
    cfg, d = run.config, run.config["data"]
    for split, n in (("train", d["n_train_per_class"]), ("test", d["n_test_per_class"]), ("fresh", d["n_fresh_per_class"])):
        ds = toydata.make_split(n, derive_seed(cfg.seed, "gen-data"), split, d["image_size"], d["n_classes"])
        toydata.save_dataset(run.path("gen-data", f"{split}.ptar"), ds)


def stage_pretrain_generator(run: Run) -> None:
    cfg, g = run.config, run.config["generator"]
    real = toydata.load_dataset(run.artifact("gen-data", "train.ptar"))
    schedule = schedule_of(cfg)
    for j in range(g["n_generators"]):
        tc = diffusion.DenoiserTrainConfig(
            steps=g["steps"], lr=g["lr"], batch=g["batch"], cond_drop=g["cond_drop"],
            seed=derive_seed(cfg.seed, "pretrain-generator", j), data_var=g["data_var"],
        )
        net, losses = diffusion.train_denoiser(real, schedule, tc, width=g["width"])
        diffusion.save_net(run.path("pretrain-generator", f"base_{j}.ptar"), net, schedule, g["guidance"], "gen_base")
        _write_rows(run.path("pretrain-generator", f"loss_{j}.csv"), [{"step": i, "loss": v} for i, v in enumerate(losses)])
        if j == 0:
            c = cfg["data"]["n_classes"]
            for name, n in (("fakes_train", g["n_fake_train"]), ("fakes_test", g["n_fake_test"])):
                ds = make_fakes(net, schedule, n, g["guidance"], cfg.seed, name, "gen_base", c)
                toydata.save_dataset(run.path("pretrain-generator", f"{name}.ptar"), ds)


def stage_pretrain_variant_generator(run: Run) -> None:
    cfg = run.config
    real = toydata.load_dataset(run.artifact("gen-data", "train.ptar"))
    net, schedule, losses = build_variant_generator(cfg, real)
    g = cfg["generator"]["guidance"]
    diffusion.save_net(run.path("pretrain-variant-generator", "variant.ptar"), net, schedule, g, "gen_variant")
    _write_rows(run.path("pretrain-variant-generator", "loss.csv"), [{"step": i, "loss": v} for i, v in enumerate(losses)])
    n = cfg["generator_variant"]["n_fake_test"]
    ds = make_fakes(net, schedule, n, g, cfg.seed, "variant_test", "gen_variant", cfg["data"]["n_classes"])
    toydata.save_dataset(run.path("pretrain-variant-generator", "fakes_test.ptar"), ds)


def stage_pretrain_detector(run: Run) -> None:
    cfg = run.config
    real = toydata.load_dataset(run.artifact("gen-data", "train.ptar"))
    fake = toydata.load_dataset(run.artifact("pretrain-generator", "fakes_train.ptar"))
    size = cfg["data"]["image_size"]
    for k in range(cfg["detector"]["n_critics"]):
        seed = derive_seed(cfg.seed, "pretrain-detector", k)
        net = det.DetectorNet(size, seed=seed, channels=cfg["detector"]["channels"])
        net, log = det.pretrain(real, fake, detector_config(cfg, seed), net)
        det.save_detector(run.path("pretrain-detector", f"critic_{k}.ptar"), net)
        _write_rows(run.path("pretrain-detector", f"log_{k}.csv"), log)


def _probe_once(run: Run, net, schedule, critic, seed: int) -> probe.ProbeResult:
    cfg = run.config
    res = probe.run_probe(net, schedule, critic, probe_config(cfg, seed))
    if cfg["probe"]["sample_mode"] == "final":
        s = res.samples
        pixels = probe.replay_samples(net, schedule, res.lora, s.class_ids, s.extra["seed"], cfg["generator"]["guidance"])
        extra = dict(s.extra)
        extra["score"] = det.predict(critic, pixels)
        res.samples = SplitDataset(pixels, s.class_ids, s.labels, s.source_tags, s.split_name, s.seed, extra)
    return res


def stage_probe(run: Run) -> None:
    cfg = run.config
    critics = _load_critics(run)
    for j in range(cfg["generator"]["n_generators"]):
        for k, critic in enumerate(critics):
            net, schedule, _ = diffusion.load_net(run.artifact("pretrain-generator", f"base_{j}.ptar"))
            res = _probe_once(run, net, schedule, critic, derive_seed(cfg.seed, "probe", j, k))
            save_lora(run.path("probe", f"lora_g{j}_c{k}.ptar"), res.lora)
            toydata.save_dataset(run.path("probe", f"samples_g{j}_c{k}.ptar"), res.samples)
            _write_rows(run.path("probe", f"log_g{j}_c{k}.csv"), res.log)


def stage_export_samples(run: Run) -> None:
    cfg = run.config
    sources = [
        toydata.load_dataset(run.artifact("probe", f"samples_g{j}_c{k}.ptar"))
        for j in range(cfg["generator"]["n_generators"])
        for k in range(cfg["detector"]["n_critics"])
    ]
    samples = aggregate_samples(sources, cfg["probe"]["n_export"], derive_seed(cfg.seed, "export-samples"))
    fresh = toydata.load_dataset(run.artifact("gen-data", "fresh.ptar"))
    toydata.save_dataset(run.path("export-samples", "probe_samples.ptar"), samples)
    toydata.save_dataset(run.path("export-samples", "paired.ptar"), paired_with_reals(samples, fresh, cfg.seed))


def stage_finetune_detector(run: Run) -> None:
    cfg = run.config
    real = toydata.load_dataset(run.artifact("gen-data", "train.ptar"))
    fake = toydata.load_dataset(run.artifact("pretrain-generator", "fakes_train.ptar"))
    paired = toydata.load_dataset(run.artifact("export-samples", "paired.ptar"))
    detector = _load_critics(run)[0]
    detector, log = det.finetune_mixed(detector, real, fake, paired, mix_config(cfg, derive_seed(cfg.seed, "finetune", 0)))
    _write_rows(run.path("finetune-detector", "log_round_0.csv"), log)
    rounds = cfg["probe"]["rounds"]
    if rounds > 1:
        fresh = toydata.load_dataset(run.artifact("gen-data", "fresh.ptar"))
    for r in range(1, rounds):
        det.save_detector(run.path("finetune-detector", f"detector_round_{r - 1}.ptar"), detector)
        net, schedule, _ = diffusion.load_net(run.artifact("pretrain-generator", "base_0.ptar"))
        res = _probe_once(run, net, schedule, detector, derive_seed(cfg.seed, "probe-round", r))
        samples = aggregate_samples([res.samples], min(cfg["probe"]["n_export"], len(res.samples)), derive_seed(cfg.seed, "export-round", r))
        toydata.save_dataset(run.path("finetune-detector", f"samples_round_{r}.ptar"), samples)
        paired = paired_with_reals(samples, fresh, derive_seed(cfg.seed, "paired-round", r))
        detector, log = det.finetune_mixed(detector, real, fake, paired, mix_config(cfg, derive_seed(cfg.seed, "finetune", r)))
        _write_rows(run.path("finetune-detector", f"log_round_{r}.csv"), log)
    det.save_detector(run.path("finetune-detector", "detector.ptar"), detector)


def _test_sets(run: Run) -> tuple[SplitDataset, dict]:
    real = toydata.load_dataset(run.artifact("gen-data", "test.ptar"))
    fakes = {
        "gen_base": toydata.load_dataset(run.artifact("pretrain-generator", "fakes_test.ptar")),
        "gen_variant": toydata.load_dataset(run.artifact("pretrain-variant-generator", "fakes_test.ptar")),
    }
    return real, fakes


def _pgd_baselines(run: Run, critic, real, fake) -> dict:
    """Detectors fine-tuned on PGD samples instead of probe samples (same w and schedule)."""
    cfg, e = run.config, run.config["eval"]
    net, schedule, _ = diffusion.load_net(run.artifact("pretrain-generator", "base_0.ptar"))
    n = e["n_pgd"]
    g = cfg["generator"]["guidance"]
    c = cfg["data"]["n_classes"]
    classes = np.arange(n) % c
    seeds = np.array([derive_seed(cfg.seed, "pgd-latents", i) for i in range(n)], dtype=np.int64)
    fresh = toydata.load_dataset(run.artifact("gen-data", "fresh.ptar"))
    out = {}
    for space in ("pixel", "latent"):
        pcfg = augment.PgdConfig(eps=e["pgd_eps"], alpha=e["pgd_alpha"], steps=e["pgd_steps"], space=space)
        if space == "pixel":
            base = diffusion.generate_images(net, schedule, classes, seeds, g)
            pixels = augment.pgd_pixel(base, critic, pcfg)
        else:
            pixels, _ = augment.pgd_latent(net, schedule, critic, classes, seeds, g, pcfg)
        tag = f"pgd_{space}"
        ds = SplitDataset(pixels, classes, np.ones(n, dtype=np.int64), [tag] * n, tag, cfg.seed, {"seed": seeds})
        toydata.save_dataset(run.path("evaluate", f"{tag}_samples.ptar"), ds)
        paired = paired_with_reals(ds, fresh, derive_seed(cfg.seed, tag))
        tuned, _ = det.finetune_mixed(det.copy_detector(critic), real, fake, paired, mix_config(cfg, derive_seed(cfg.seed, "finetune", tag)))
        det.save_detector(run.path("evaluate", f"detector_{tag}.ptar"), tuned)
        out[tag] = tuned
    return out


def stage_evaluate(run: Run) -> None:
    cfg = run.config
    real_test, fakes = _test_sets(run)
    pretrained = _load_critics(run)[0]
    finetuned = det.load_detector(run.artifact("finetune-detector", "detector.ptar"))
    detectors = {"pretrained": pretrained, "finetuned": finetuned}
    if cfg["eval"]["pgd"]:
        real = toydata.load_dataset(run.artifact("gen-data", "train.ptar"))
        fake = toydata.load_dataset(run.artifact("pretrain-generator", "fakes_train.ptar"))
        detectors.update(_pgd_baselines(run, pretrained, real, fake))
    rep = metrics.MetricsReport()
    for name, d in detectors.items():
        _score_rows(rep, cfg.run_id, cfg.seed, name, d, real_test, fakes)
    probe_samples = toydata.load_dataset(run.artifact("export-samples", "probe_samples.ptar"))
    rep.add(cfg.run_id, "evaluate", "probe", "probe", "score_mean", float(np.mean(probe_samples.extra["score"])), cfg.seed, "detector=critic")
    rep.write_csv(run.path("evaluate", "metrics.csv"))
    rep.write_jsonl(run.path("evaluate", "metrics.jsonl"))


def stage_sweep_robustness(run: Run) -> None:
    cfg, e = run.config, run.config["eval"]
    real_test, fakes = _test_sets(run)
    grid = {"blur": e["blur_grid"], "jpeg": e["jpeg_grid"], "resize": e["resize_grid"]}
    detectors = {
        "pretrained": _load_critics(run)[0],
        "finetuned": det.load_detector(run.artifact("finetune-detector", "detector.ptar")),
    }
    rep = metrics.MetricsReport()
    for name, d in detectors.items():
        for tag, fk in fakes.items():
            images = list(np.concatenate([real_test.pixels, fk.pixels]))
            labels = np.r_[np.zeros(len(real_test)), np.ones(len(fk))]
            rep.extend(metrics.robustness_sweep(d, images, labels, grid, cfg.run_id, cfg.seed, tag, "test", param_prefix=f"detector={name};"))
    rep.write_csv(run.path("sweep-robustness", "sweep.csv"))
    rep.write_jsonl(run.path("sweep-robustness", "sweep.jsonl"))


def stage_analyze_spectrum(run: Run) -> None:
    cfg = run.config
    n = cfg["eval"]["n_spectrum"]
    net, schedule, _ = diffusion.load_net(run.artifact("pretrain-generator", "base_0.ptar"))
    real_test, fakes = _test_sets(run)
    sets = {"real": real_test, **fakes, "probe": toydata.load_dataset(run.artifact("export-samples", "probe_samples.ptar"))}
    for tag, ds in sets.items():
        radius, energy = metrics.residual_spectrum(net, schedule, ds.pixels[:n], cfg["eval"]["t_probe"])
        metrics.write_profile_csv(run.path("analyze-spectrum", f"profile_{tag}.csv"), radius, energy)


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "pretrain-generator": stage_pretrain_generator,
    "pretrain-variant-generator": stage_pretrain_variant_generator,
    "pretrain-detector": stage_pretrain_detector,
    "probe": stage_probe,
    "export-samples": stage_export_samples,
    "finetune-detector": stage_finetune_detector,
    "evaluate": stage_evaluate,
    "sweep-robustness": stage_sweep_robustness,
    "analyze-spectrum": stage_analyze_spectrum,
}


def run_stage(config: RunConfig, stage: str, out_dir=None) -> Run:
    """Run one stage (or ``run-all``) and return the run handle."""
    from threadpoolctl import threadpool_limits

    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    run = Run.open(config, out_dir)
    names = topological_order() if stage == "run-all" else [stage]
    # a single BLAS thread keeps reductions in a fixed order
    with threadpool_limits(limits=1), tn.precision(config["io"]["precision"]):
        for name in names:
            run.check_dependencies(name)
            started = _now()
            STAGE_FUNCS[name](run)
            run.record(name, started)
    return run
