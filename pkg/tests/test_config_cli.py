import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from probekit import archive, cli, pipeline
from probekit.config import default_config, parse_config
from probekit.errors import ConfigError, ContractError, DependencyError
from probekit.toydata import SplitDataset

SMALL = """\
seed = 3
[data]
n_train_per_class = 40
n_test_per_class = 20
n_fresh_per_class = 20
[generator]
steps = 200
n_fake_train = 160
n_fake_test = 80
[generator_variant]
steps = 200
n_fake_test = 80
[detector]
max_epochs = 3
ft_max_epochs = 2
[probe]
n_prompts = 64
n_export = 64
[eval]
n_pgd = 40
n_spectrum = 40
"""


# ---------------------------------------------------------------------------
# config


def test_defaults_carry_the_reference_hyperparameters():
    cfg = default_config()
    assert cfg["probe"]["lam"] == 1.0 and cfg["detector"]["w"] == 0.5
    assert cfg["probe"]["K"] == 5 and cfg["probe"]["t_s"] == 5 and cfg["generator"]["T"] == 35
    assert cfg.run_id == "run-" + cfg.hash()[:12]


def test_parse_reads_sections_comments_and_top_level_keys():
    cfg = parse_config("seed = 9  # top\n[probe]\nlam = 0.25\nK = 3\n[eval]\nblur_grid = 0, 1.5\n")
    assert cfg.seed == 9 and cfg["probe"]["lam"] == 0.25 and cfg["probe"]["K"] == 3
    assert cfg["eval"]["blur_grid"] == (0.0, 1.5)


@pytest.mark.parametrize(
    "text",
    [
        "[probe]\nlambda = 1\n",
        "[probes]\nlam = 1\n",
        "sed = 1\n",
        "[probe]\nK = 40\n",
        "[probe]\nlam = -1\n",
        "[detector]\nw = 1.5\n",
        "[generator]\nT = many\n",
        "[eval]\npgd_alpha = 0.1\n",
        "[probe\n",
    ],
)
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_text_round_trip_keeps_hash():
    cfg = parse_config(SMALL)
    assert parse_config(cfg.to_text()).hash() == cfg.hash()


def test_any_semantic_change_moves_the_hash():
    base = default_config()
    seen = {base.hash()}
    for section, key, value in [
        ("__top__", "seed", 1),
        ("probe", "lam", 0.5),
        ("detector", "w", 0.25),
        ("generator", "guidance", 3.0),
        ("eval", "jpeg_grid", (95, 75)),
    ]:
        seen.add(base.override(section, **{key: value}).hash())
    assert len(seen) == 6
    assert base.override("io", out_dir="elsewhere").hash() == base.hash()


def test_override_validates():
    with pytest.raises(ConfigError):
        default_config().override("probe", K=99)
    with pytest.raises(ConfigError):
        default_config().override("probe", nope=1)


# ---------------------------------------------------------------------------
# dependency graph


def test_graph_is_acyclic_and_ordered():
    order = pipeline.topological_order()
    assert set(order) == set(pipeline.DEPENDENCIES)
    for stage, deps in pipeline.DEPENDENCIES.items():
        assert all(order.index(d) < order.index(stage) for d in deps)


def _upstream(stage):
    seen, todo = set(), [stage]
    while todo:
        for d in pipeline.DEPENDENCIES[todo.pop()]:
            if d not in seen:
                seen.add(d)
                todo.append(d)
    return seen


def test_variant_is_outside_the_training_path():
    for stage in ("pretrain-detector", "probe", "export-samples", "finetune-detector"):
        assert "pretrain-variant-generator" not in _upstream(stage)


def test_explain_flag(capsys):
    assert cli.main(["--explain"]) == 0
    out = capsys.readouterr().out
    assert "probe  <-  pretrain-generator, pretrain-detector" in out
    assert out.strip().splitlines()[-1].startswith("run-all  =  gen-data")


# ---------------------------------------------------------------------------
# aggregation


def _source(n, tag, value):
    return SplitDataset(np.full((n, 4, 4), value, np.float32), np.zeros(n, int), np.ones(n), [tag] * n)


def test_aggregate_counts_and_provenance():
    srcs = [_source(5, "probe", v) for v in (0.1, 0.2, 0.3)]
    out = pipeline.aggregate_samples(srcs, 9, seed=0)
    assert len(out) == 9
    assert sorted(np.unique(out.pixels[:, 0, 0], return_counts=True)[1]) == [3, 3, 3]
    assert set(out.source_tags) == {"probe"}
    out = pipeline.aggregate_samples(srcs, 10, seed=0)
    assert np.isclose(out.pixels[:, 0, 0], 0.1).sum() == 4


def test_aggregate_single_source_and_errors():
    src = SplitDataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1) / 10, np.zeros(10, int), np.ones(10), ["probe"] * 10)
    a = pipeline.aggregate_samples([src], 6, seed=1)
    b = pipeline.aggregate_samples([src], 6, seed=1)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert len(np.unique(a.pixels)) == 6
    with pytest.raises(ContractError):
        pipeline.aggregate_samples([src], 11, seed=1)
    with pytest.raises(ContractError):
        pipeline.aggregate_samples([], 1, seed=1)


# ---------------------------------------------------------------------------
# CLI and runs


def test_exit_code_for_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[probe]\nlamda = 1\n")
    assert cli.main(["--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["--config", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["--stage", "nonsense", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_for_missing_dependency(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "--stage", "probe"]) == 3
    err = capsys.readouterr().err
    assert "pretrain-detector" in err and "pretrain-generator" in err


def test_dependency_error_lists_missing_stage(tmp_path):
    run = pipeline.Run.open(parse_config(SMALL), tmp_path)
    with pytest.raises(DependencyError) as info:
        run.check_dependencies("export-samples")
    assert "gen-data" in str(info.value) and "probe" in str(info.value)


def test_hash_mismatch_refuses_to_overwrite(tmp_path):
    cfg = parse_config(SMALL).override(run_id="fixed")
    pipeline.Run.open(cfg, tmp_path)
    with pytest.raises(ConfigError):
        pipeline.Run.open(cfg.override("probe", lam=0.5), tmp_path)


def _artifact_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg_file = base / "small.ini"
    cfg_file.write_text(SMALL)
    roots = []
    for name in ("a", "b"):
        assert cli.main(["--config", str(cfg_file), "--out", str(base / name)]) == 0
        roots.append(next((base / name).iterdir()))
    return cfg_file, roots


def test_run_all_writes_every_stage(small_runs):
    _, (root, _) = small_runs
    man = json.loads((root / "manifest.json").read_text())
    assert set(man["stages"]) == set(pipeline.DEPENDENCIES)
    for entry in man["stages"].values():
        assert entry["artifacts"] and all((root / a).exists() for a in entry["artifacts"])
    header = (root / "evaluate" / "metrics.csv").read_text().splitlines()[0]
    assert header == "run_id,stage,split,generator_tag,metric,value,seed,param"
    assert (root / "analyze-spectrum" / "profile_probe.csv").exists()


def test_manifest_artifacts_round_trip(small_runs):
    _, (root, _) = small_runs
    man = json.loads((root / "manifest.json").read_text())
    ptars = [a for entry in man["stages"].values() for a in entry["artifacts"] if a.endswith(".ptar")]
    assert ptars
    for a in ptars:
        entries = archive.load_archive(root / a)
        assert archive.decode_archive(archive.encode_archive(entries)).keys() == entries.keys()


def test_variant_never_feeds_probe_or_finetune(small_runs):
    _, (root, _) = small_runs
    man = json.loads((root / "manifest.json").read_text())
    for stage in ("probe", "export-samples", "finetune-detector", "pretrain-detector"):
        assert not any("variant" in a for a in man["stages"][stage]["artifacts"])


def test_two_runs_are_byte_identical(small_runs):
    _, (a, b) = small_runs
    assert a.name == b.name
    ba, bb = _artifact_bytes(a), _artifact_bytes(b)
    assert ba.keys() == bb.keys()
    assert [k for k in ba if ba[k] != bb[k]] == []


def test_rerunning_a_stage_reproduces_it(small_runs, tmp_path):
    cfg_file, (root, _) = small_runs
    copy = tmp_path / root.name
    shutil.copytree(root, copy)
    before = (copy / "evaluate" / "metrics.csv").read_bytes()
    assert cli.main(["--config", str(cfg_file), "--out", str(tmp_path), "--stage", "evaluate"]) == 0
    assert (copy / "evaluate" / "metrics.csv").read_bytes() == before


def test_seed_override_gives_a_new_namespace(small_runs, tmp_path):
    cfg = parse_config(SMALL)
    assert cfg.override(seed=4).run_id != cfg.run_id
