import json

import numpy as np
import pytest
import torch

from probpcqa.subjective_sim import PRESETS as DATA_PRESETS
from probpcqa.subjective_sim import build_dataset, read_manifest, write_manifest
from probpcqa.trainer import (
    Adam,
    ConfigError,
    DivergenceError,
    TrainConfig,
    configure_threads,
    format_config_text,
    load_checkpoint,
    lr_at,
    parse_config_text,
    preset,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("tinydata")
    build_dataset(DATA_PRESETS["tiny"], d)
    return read_manifest(d / "manifest.jsonl")


# -- optimizer ------------------------------------------------------------------


def test_adam_first_step_is_lr_sized():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
    opt = Adam([("p", p)], beta1=0.5, beta2=0.999)
    p.grad = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
    opt.step(1e-3)
    moved = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64) - p.detach()
    # bias-corrected first step is lr * g / (|g| + eps)
    assert torch.allclose(moved, 1e-3 * torch.sign(p.grad), rtol=1e-4)


def test_adam_matches_reference_optimizer():
    g = torch.Generator().manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, generator=g, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ours = Adam([("a", a)], beta1=0.5, beta2=0.999, eps=1e-8)
    ref = torch.optim.Adam([b], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
    for _ in range(10):
        grad = torch.randn(5, generator=g, dtype=torch.float64)
        a.grad, b.grad = grad.clone(), grad.clone()
        ours.step(1e-2)
        ref.step()
    assert torch.allclose(a, b, atol=1e-12)
    assert ours.t == 10


def test_adam_requires_gradients():
    p = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(RuntimeError, match="p has no gradient"):
        Adam([("p", p)]).step(1e-3)


def test_lr_schedule():
    cfg = preset("paper")
    assert lr_at(1, cfg) == 2.5e-5
    assert lr_at(100, cfg) == 2.5e-5
    assert lr_at(101, cfg) == 1.25e-5
    assert lr_at(200, cfg) == 1.25e-5
    with pytest.raises(ValueError):
        lr_at(201, cfg)


# -- configuration --------------------------------------------------------------


def test_presets_and_overrides():
    assert preset("paper").beta1 == 0.5 and preset("paper").batch == 8
    assert preset("desk", epochs=3).epochs == 3
    with pytest.raises(ConfigError):
        preset("nope")
    assert preset("desk", alpha_override=0.2).effective_alpha == 0.2
    assert preset("desk", no_stochastic=True).model_config().stochastic is False


def test_config_text_round_trip():
    cfg = preset("tiny", alpha=0.6, no_depth=True)
    assert parse_config_text(format_config_text(cfg)) == cfg
    parsed = parse_config_text("preset = tiny\n# comment\nepochs = 5\n")
    assert parsed == preset("tiny", epochs=5)


@pytest.mark.parametrize(
    "text, msg",
    [
        ("epochs = 5\nbogus = 1\n", "line 2: unknown key"),
        ("lr 0.1\n", "line 1: expected"),
        ("\npreset = huge\n", "line 2"),
        ("alpha = 1.5\n", "line 1"),
    ],
)
def test_config_text_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_configure_threads(monkeypatch):
    monkeypatch.setenv("PROBPCQA_THREADS", "1")
    configure_threads()
    assert torch.get_num_threads() == 1


# -- training -------------------------------------------------------------------


def test_train_log_and_checkpoint(tiny_data, tmp_path):
    cfg = preset("tiny")
    ck, logs = train(tiny_data, cfg, out_dir=tmp_path)
    assert [r["epoch"] for r in logs] == [1, 2]
    assert [r["lambda"] for r in logs] == [0.5, 1.0]
    assert all(np.isfinite(r["total"]) and r["probe_rating_var"] >= 0 for r in logs)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == logs
    back = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert back.config == cfg and back.epoch == 2 and back.adam_step == ck.adam_step
    for n in ck.params:
        assert np.array_equal(back.params[n], ck.params[n])
        assert np.array_equal(back.moments_m[n], ck.moments_m[n])
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "checkpoint.ckpt").read_bytes()


def test_train_is_deterministic(tiny_data, tmp_path):
    cfg = preset("tiny", epochs=1)
    train(tiny_data, cfg, out_dir=tmp_path / "a")
    train(tiny_data, cfg, out_dir=tmp_path / "b")
    for name in ("checkpoint.ckpt", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_is_bit_identical(tiny_data, tmp_path):
    cfg = preset("tiny", epochs=3)
    full, full_log = train(tiny_data, cfg, out_dir=tmp_path / "full", checkpoint_every=1)
    assert (tmp_path / "full" / "checkpoint_e0001.ckpt").exists()
    train(tiny_data, cfg, out_dir=tmp_path / "part", stop_after=1)
    mid = load_checkpoint(tmp_path / "part" / "checkpoint.ckpt")
    assert mid.epoch == 1
    _, rest = train(tiny_data, cfg, out_dir=tmp_path / "part", resume=mid)
    assert rest == full_log[1:]
    a = (tmp_path / "full" / "checkpoint.ckpt").read_bytes()
    b = (tmp_path / "part" / "checkpoint.ckpt").read_bytes()
    assert a == b
    with pytest.raises(ValueError, match="different config"):
        train(tiny_data, cfg.replace(lr=1.0), resume=mid)


def test_no_stochastic_checkpoint_has_only_qrg(tiny_data):
    ck, logs = train(tiny_data, preset("tiny", epochs=1, no_stochastic=True))
    assert ck.params and all(n.startswith("qrg.") for n in ck.params)
    assert logs[0]["alpha"] is None and logs[0]["probe_rating_var"] == 0.0
    full, _ = train(tiny_data, preset("tiny", epochs=1))
    prefixes = {n.split(".")[0] for n in full.params}
    assert prefixes == {"prior", "posterior", "qrg"}


def test_no_annealing_uses_full_kl_weight(tiny_data):
    _, logs = train(tiny_data, preset("tiny", no_annealing=True))
    assert [r["lambda"] for r in logs] == [1.0, 1.0]


def test_divergence_is_reported(tiny_data, tmp_path):
    with pytest.raises(DivergenceError) as info:
        train(tiny_data, preset("tiny", lr=1e30), out_dir=tmp_path)
    err = info.value
    assert err.epoch == 1 and err.step >= 1 and err.sample_ids
    events = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert events[-1]["event"] == "divergence"
    assert events[-1]["sample_ids"] == list(err.sample_ids)


def test_unreadable_sample(tiny_data, tmp_path):
    m = read_manifest(tiny_data.root / "manifest.jsonl")
    victim = m.split("train")[0]
    bad = tmp_path / "broken.ply"
    bad.write_text("not a ply file\n")
    victim.path = str(bad)
    with pytest.raises(ValueError, match=victim.id):
        train(m, preset("tiny", epochs=1))


def test_relative_paths_resolve_against_manifest_dir(tiny_data, tmp_path):
    # a copy of the manifest in another directory no longer finds the clouds
    write_manifest(tiny_data, tmp_path / "copy.jsonl")
    m = read_manifest(tmp_path / "copy.jsonl")
    with pytest.raises(ValueError):
        train(m, preset("tiny", epochs=1))


def test_invalid_config_values():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(viewpoints_per="never")
