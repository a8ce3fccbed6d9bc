from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urbanfill import data, masking, nn, train
from urbanfill.errors import NumericError, ParameterError, ShapeError

SMALL = Fraction(1, 16)
MASK_CFG = masking.MaskGenConfig(walk_steps=40)


def _blocks(T=1, n_days=1, grid=16, seed=3):
    s = data.generate_synthetic(data.default_city(grid, seed=seed), n_days)
    return data.chunk_series(s, T)


def _cfg(**kw):
    base = dict(T=1, batch_size=4, max_iters=4, validate_every=2, width_scale=SMALL, mask_cfg=MASK_CFG)
    base.update(kw)
    return train.TrainConfig(**base)


def test_lr_schedule_examples():
    cfg = train.TrainConfig(T=3)
    assert train.lr_at(0, cfg) == 0.01
    assert train.lr_at(499, cfg) == 0.01
    assert train.lr_at(500, cfg) == pytest.approx(0.009, rel=1e-15)
    assert train.lr_at(1499, cfg) == pytest.approx(0.0081, rel=1e-15)
    with pytest.raises(ParameterError):
        train.lr_at(-1, cfg)


@given(st.integers(0, 20000), st.integers(0, 20000))
def test_lr_schedule_monotone_and_stepwise(a, b):
    cfg = train.TrainConfig(T=3)
    lo, hi = min(a, b), max(a, b)
    assert train.lr_at(hi, cfg) <= train.lr_at(lo, cfg)
    if lo // 500 == hi // 500:
        assert train.lr_at(hi, cfg) == train.lr_at(lo, cfg)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr0=0), dict(mask_mode="nope"), dict(lam=-1),
                                dict(max_iters=-1), dict(validate_every=0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        train.TrainConfig(T=3, **kw)


@given(st.integers(0, 1000), st.integers(0, 200), st.integers(1, 9), st.integers(1, 30))
def test_batches_cover_each_epoch(seed, it, B, n):
    # concatenating batches reproduces a sequence of full permutations
    flat = [i for k in range(it, it + 3) for i in train.batch_indices(seed, k, B, n)]
    assert len(flat) == 3 * B
    assert all(0 <= i < n for i in flat)
    start = it * B
    for e in range(start // n, (start + 3 * B) // n):
        lo, hi = max(e * n, start), min((e + 1) * n, start + 3 * B)
        seg = flat[lo - start:hi - start]
        assert len(set(seg)) == len(seg)


def test_iteration_masks_reproducible_and_distinct():
    blocks = [b.data for b in _blocks(T=2)[:3]]
    cfg = _cfg(T=2)
    a = train.iteration_masks(blocks, cfg, 5)
    b = train.iteration_masks(blocks, cfg, 5)
    c = train.iteration_masks(blocks, cfg, 6)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert not np.array_equal(a[0].data, a[1].data)
    assert not np.array_equal(a[0].data, c[0].data)


def test_validate_oracle_and_zero_predictor(monkeypatch):
    blocks = _blocks(T=1)[:4]
    suite = train.build_mask_suite(blocks, 11, MASK_CFG)
    model = nn.build_unet(nn.UNetConfig(1, SMALL))
    gts = [b.data for b in blocks]

    monkeypatch.setattr(train, "predict_blocks", lambda m, bl, ms, batch=16: [g.copy() for g in gts])
    assert train.validate(model, blocks, suite) == {"random": 0.0, "biased": 0.0}

    monkeypatch.setattr(train, "predict_blocks", lambda m, bl, ms, batch=16: [np.zeros_like(g) for g in gts])
    scores = train.validate(model, blocks, suite)
    for name, masks in suite.items():
        vals = np.concatenate([g[m.data == 0] for g, m in zip(gts, masks)])
        assert scores[name] == pytest.approx(vals.astype(np.float64).mean(), rel=1e-12)


def test_validate_rejects_misaligned_suite():
    blocks = _blocks(T=1)[:2]
    model = nn.build_unet(nn.UNetConfig(1, SMALL))
    with pytest.raises(ShapeError):
        train.validate(model, blocks, {"random": []})


def test_loss_falls_on_a_fixed_batch():
    blocks = [b.data for b in _blocks(T=1)[8:12]]
    x = np.stack(blocks)
    cfg = _cfg()
    m = np.stack([mk.data for mk in train.iteration_masks(blocks, cfg, 0)]).astype(np.float32)
    model = nn.build_unet(nn.UNetConfig(1, SMALL), seed=0)
    first = train.train_step(model, x, m, 12.0, 0.01)[0]
    for _ in range(40):
        last = train.train_step(model, x, m, 12.0, 0.01)[0]
    assert last < 0.5 * first


def test_training_is_deterministic(tmp_path):
    blocks = _blocks(T=1)
    val = blocks[:3]
    _, a = train.train(blocks, _cfg(), val)
    _, b = train.train(blocks, _cfg(), val)
    assert a.steps == b.steps and a.validations == b.validations
    assert [v[0] for v in a.validations] == [2, 2, 4, 4]


def test_resume_matches_uninterrupted(tmp_path):
    blocks = _blocks(T=1)
    val = blocks[:3]
    _, full = train.train(blocks, _cfg(max_iters=6), val, ckpt_path=tmp_path / "a.uckp")
    _, part = train.train(blocks, _cfg(max_iters=2), val, ckpt_path=tmp_path / "b.uckp")
    _, resumed = train.train(blocks, _cfg(max_iters=6), val, ckpt_path=tmp_path / "b.uckp",
                                         resume=True, log_=part)
    assert resumed.steps == full.steps
    assert resumed.validations == full.validations
    assert (tmp_path / "a.uckp").read_bytes() == (tmp_path / "b.uckp").read_bytes()
    _, extra = nn.load_model(tmp_path / "a.uckp")
    assert int(extra["train.iter"][0]) == 6


def test_resume_needs_checkpoint(tmp_path):
    with pytest.raises(ParameterError):
        train.train(_blocks(T=1), _cfg(), resume=True, ckpt_path=tmp_path / "missing.uckp")


def test_dataset_checks():
    with pytest.raises(ParameterError):
        train.train([], _cfg())
    with pytest.raises(ShapeError):
        train.train(_blocks(T=2), _cfg(T=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_raises_and_dumps(tmp_path):
    # plain arrays bypass the finiteness check GridBlock would apply
    blocks = [b.data for b in _blocks(T=1)]
    blocks[0] = np.full((1, 16, 16), np.inf, np.float32)
    cfg = _cfg(batch_size=len(blocks), max_iters=2)
    with pytest.raises(NumericError):
        train.train(blocks, cfg, ckpt_path=tmp_path / "c.uckp")
    assert (tmp_path / "c.uckp.nan").exists()


def test_log_roundtrip_and_ordering(tmp_path):
    lg = train.TrainLog()
    lg.add_step(0, 0.01, 1.0 / 3, 0.1, 0.2)
    lg.add_step(1, 0.01, 0.5, 0.1, 0.2)
    lg.validations.append((2, "random", 0.125))
    with pytest.raises(ParameterError):
        lg.add_step(1, 0.01, 0.5, 0.1, 0.2)
    p = tmp_path / "log.csv"
    lg.write(p, train.validation_path(p))
    assert train.validation_path(p).name == "log.val.csv"
    back = train.TrainLog.read(p, train.validation_path(p))
    assert back.steps == lg.steps and back.validations == lg.validations
    assert lg.final_validation() == {"random": 0.125}
