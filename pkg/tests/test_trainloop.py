import hashlib

import pytest
import torch

from ashplus.config import TrainConfig
from ashplus.errors import ConfigError
from ashplus.metrics import evaluate
from ashplus.nets import Decoder, Encoder, freeze, load_checkpoint
from ashplus.synthdata import default_spec, generate_domain, generate_style_pool
from ashplus.trainloop import (ABLATION_ROWS, LOSS_COLUMNS, SIGMA_GRIDS, ablation_suite,
                               load_segmenter, noise_seed, read_metrics_csv, sigma_sweep,
                               train_ashplus, train_source_only, train_uniform)


@pytest.fixture(scope="module")
def world():
    torch.manual_seed(0)
    source = generate_domain(default_spec(), 12, seed=1)
    target = generate_domain(default_spec("target"), 4, seed=2)
    pool = generate_style_pool(4, seed=3)
    ae = (freeze(Encoder()), freeze(Decoder()))
    return source, target, pool, ae


def _cfg(**kw):
    base = dict(iter_num=3, warmup_iters=1, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


def _digest(module):
    h = hashlib.sha256()
    for v in module.state_dict().values():
        h.update(v.numpy().tobytes())
    return h.hexdigest()


def test_single_iteration_step_order(world):
    source, _, pool, ae = world
    events = []
    train_ashplus(source, pool, _cfg(iter_num=1, warmup_iters=0), ae,
                  hooks=[lambda e, i: events.append((e, i))])
    assert events == [("hallucinate", 0), ("dft_step", 0), ("g_step", 0)]


def test_warmup_then_joint_order(world):
    source, _, pool, ae = world
    events = []
    record = train_ashplus(source, pool, _cfg(iter_num=2, warmup_iters=2), ae,
                           hooks=[lambda e, i: events.append(e)])
    assert events == ["g_step", "g_step"] + ["hallucinate", "dft_step", "g_step"] * 2
    assert [r["iter"] for r in record.losses] == [0, 1, 2, 3]


def test_encoder_decoder_unchanged(world):
    source, _, pool, ae = world
    before = [_digest(m) for m in ae]
    train_ashplus(source, pool, _cfg(iter_num=4), ae)
    assert [_digest(m) for m in ae] == before


def test_disjoint_parameter_updates(world, monkeypatch):
    import ashplus.trainloop as tl

    source, _, pool, ae = world
    live = {}

    def recording(cls, key):
        class Recorded(cls):
            def __init__(self, *a, **k):
                super().__init__(*a, **k)
                live[key] = self
        return Recorded

    monkeypatch.setattr(tl, "DualFeatureTransform", recording(tl.DualFeatureTransform, "dft"))
    monkeypatch.setattr(tl, "SegNet", recording(tl.SegNet, "seg"))
    snapshots = {}

    def hook(event, it):
        snapshots.setdefault(it, []).append((event, _digest(live["seg"]), _digest(live["dft"])))

    train_ashplus(source, pool, _cfg(iter_num=3, warmup_iters=0), ae, hooks=[hook])
    for it in (1, 2):
        (e1, seg_h, dft_h), (e2, seg_d, dft_d), (e3, seg_g, dft_g) = snapshots[it]
        assert (e1, e2, e3) == ("hallucinate", "dft_step", "g_step")
        assert seg_h == seg_d and dft_h != dft_d  # dFT step leaves G alone
        assert dft_d == dft_g and seg_d != seg_g  # G step leaves dFT alone


def test_source_only_has_no_dft_and_writes_outputs(world, tmp_path):
    source, target, _, _ = world
    record = train_source_only(source, _cfg(), eval_domains=[target], out_dir=tmp_path)
    state = load_checkpoint(record.checkpoint_path)
    assert not state.has_module("dft") and not state.has_module("encoder")
    rows = read_metrics_csv(record.metrics_path)
    assert len(rows) == 4 and all(r["cont"] is None for r in rows)
    assert list(rows[0]) == list(LOSS_COLUMNS)


def test_checkpoint_reproduces_logged_miou(world, tmp_path):
    source, target, pool, ae = world
    record = train_ashplus(source, pool, _cfg(), ae, eval_domains=[target], out_dir=tmp_path)
    state = load_checkpoint(record.checkpoint_path)
    assert state.has_module("dft")
    reloaded = evaluate(load_segmenter(record.checkpoint_path), target)
    assert reloaded.miou == state.meta["final_miou"]["target"] == record.results[0].miou


@pytest.mark.parametrize("mode", ["source", "uniform", "ashplus"])
def test_bitwise_determinism(world, tmp_path, mode):
    source, target, pool, ae = world

    def run(sub):
        cfg = _cfg(seed=5)
        if mode == "source":
            return train_source_only(source, cfg, eval_domains=[target], out_dir=tmp_path / sub)
        if mode == "uniform":
            return train_uniform(source, pool, cfg.replace(uniform_w=0.3), ae, eval_domains=[target],
                                 out_dir=tmp_path / sub)
        return train_ashplus(source, pool, cfg, ae, eval_domains=[target], out_dir=tmp_path / sub)

    a, b = run("a"), run("b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()


def test_uniform_reconstruction_corner_and_distinct_strengths(world, monkeypatch):
    import ashplus.trainloop as tl

    source, _, pool, ae = world
    seen = {}
    real = tl.uniform_hallucinate

    def spy(X_s, X_style, enc, dec, w):
        out = real(X_s, X_style, enc, dec, w)
        seen.setdefault(w, []).append((X_s, out))
        return out

    monkeypatch.setattr(tl, "uniform_hallucinate", spy)
    for w in (1.0, 0.1, 0.8):
        train_uniform(source, pool, _cfg(iter_num=2, warmup_iters=0, uniform_w=w), ae)
    enc, dec = ae
    for X_s, out in seen[1.0]:
        assert torch.equal(out, dec(enc(X_s)[-1]).clamp(0, 1))
    assert not torch.equal(seen[0.1][0][1], seen[0.8][0][1])


def test_config_errors_before_any_step(world):
    source, _, pool, ae = world
    events = []
    with pytest.raises(ConfigError):
        train_ashplus(source, pool, _cfg(enable_adversarial=False), ae, hooks=[lambda e, i: events.append(e)])
    with pytest.raises(ConfigError):
        train_ashplus(source, pool, _cfg(), None)
    with pytest.raises(ConfigError):
        train_source_only(source, _cfg(num_classes=5))
    assert events == []


def test_noise_seed_varies_per_iteration():
    assert noise_seed(0, 0) != noise_seed(0, 1)
    assert noise_seed(1, 0) != noise_seed(0, 0)


def test_ablation_rows_and_csv(world, tmp_path):
    source, target, pool, ae = world
    names = [name for name, _ in ABLATION_ROWS]
    assert names == ["baseline", "stylization", "orthogonal_noise", "ash", "ash_plus"]
    flags = [list(t.values()) for _, t in ABLATION_ROWS]
    # each row switches on one more component
    assert [sum(f) for f in flags] == [0, 1, 2, 3, 4]
    rows = ablation_suite(source, pool, _cfg(iter_num=1, warmup_iters=0), ae, eval_domains=[target],
                          out_dir=tmp_path)
    assert [r.name for r in rows] == names
    lines = (tmp_path / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 6 and lines[0].startswith("row,")
    assert rows[0].record.dft is None and rows[-1].record.dft is not None


def test_sigma_grids_match_tables():
    assert SIGMA_GRIDS["synthia-default"] == ((0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25))
    assert SIGMA_GRIDS["gta5-default"] == ((0.1, 0.9), (0.4, 0.6), (0.4, 0.4), (0.5, 0.5),
                                           (0.6, 0.4), (0.7, 0.3), (0.75, 1.5), (0.25, 0.5))


def test_sigma_sweep_csv(world, tmp_path):
    source, target, pool, ae = world
    rows = sigma_sweep(source, pool, "synthia-default", _cfg(iter_num=1, warmup_iters=0), ae,
                       eval_domains=[target], csv_path=tmp_path / "sweep.csv")
    assert [(r["sigma1"], r["sigma2"]) for r in rows] == list(SIGMA_GRIDS["synthia-default"])
    lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == "sigma1,sigma2,miou_target,avg" and len(lines) == 5
    with pytest.raises(ConfigError):
        sigma_sweep(source, pool, "nope", _cfg(), ae)
