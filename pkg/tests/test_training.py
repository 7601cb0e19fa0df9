import numpy as np
import pytest

from tftransformer.audio_features import LogMelSegment
from tftransformer.model import ModelConfig, TimeFrequencyTransformer
from tftransformer.nncore import NumericError, Tensor, functional as F
from tftransformer.nncore.checkpoint import FormatError
from tftransformer.nncore.gradcheck import relative_error
from tftransformer.synthetic import band_pattern_corpus
from tftransformer.training import (
    LOG_HEADER,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    class_weights,
    fit,
    make_batches,
    make_optimizer,
    restore,
    stack_segments,
    train_epoch,
    verify_gradients,
)


def small_config(**kw):
    return ModelConfig.build(f=16, d=16, c1=4, ff_dim=8, fusion_ff_dim=8, heads=(2, 2, 2), **kw)


@pytest.fixture(scope="module")
def small_data():
    manifest, feats = band_pattern_corpus(per_class=8, f=16, d=16, seed=0)
    return stack_segments([s for uid in manifest.ids() for s in feats[uid]])


def params_of(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ----------------------------------------------------------------------
# batching


def test_batch_sizes_keep_partial():
    X, y = np.zeros((130, 1, 2, 2)), np.arange(130)
    batches = make_batches(X, y, 64, np.random.default_rng(0))
    assert [len(b) for _, b in batches] == [64, 64, 2]


def test_each_segment_once_per_epoch():
    X = np.arange(37, dtype=float).reshape(37, 1, 1, 1)
    y = np.arange(37)
    batches = make_batches(X, y, 8, np.random.default_rng(1))
    seen = np.concatenate([b for _, b in batches])
    assert sorted(seen.tolist()) == list(range(37))
    xs = np.concatenate([xb.data.ravel() for xb, _ in batches])
    np.testing.assert_array_equal(xs, seen)


def test_same_seed_same_order():
    X, y = np.zeros((20, 1, 1, 1)), np.arange(20)
    a = [b.tolist() for _, b in make_batches(X, y, 6, np.random.default_rng([3, 1]))]
    b = [b.tolist() for _, b in make_batches(X, y, 6, np.random.default_rng([3, 1]))]
    c = [b.tolist() for _, b in make_batches(X, y, 6, np.random.default_rng([3, 2]))]
    assert a == b and a != c


def test_empty_dataset():
    with pytest.raises(ValueError):
        make_batches(np.zeros((0, 1, 2, 2)), np.zeros(0), 4, None)
    with pytest.raises(ValueError):
        stack_segments([])


def test_stack_segments():
    segs = [LogMelSegment(np.full((4, 4), i, np.float32), "u", i, i % 2) for i in range(3)]
    X, y = stack_segments(segs)
    assert X.shape == (3, 1, 4, 4) and X.dtype == np.float32
    np.testing.assert_array_equal(y, [0, 1, 0])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=-1).validate()
    TrainConfig(lr=0).validate()


def test_class_weights():
    w = class_weights(np.array([0, 0, 0, 1]), 3)
    np.testing.assert_allclose(w, [4 / 9, 4 / 3, 0])


# ----------------------------------------------------------------------
# epochs


def test_lr_zero_is_noop(small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    before = {n: p.data.copy() for n, p in model.trainable_parameters()}
    cfg = TrainConfig(batch_size=8, epochs=1, lr=0.0)
    fit(model, X, y, cfg)
    after = {n: p.data for n, p in model.trainable_parameters()}
    assert same_params(before, after)


def test_lr_zero_full_batch_train_war_flat(small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    # one batch holding every sample makes BN statistics independent of the shuffle
    _, history = fit(model, X, y, TrainConfig(batch_size=len(X), epochs=3, lr=0.0))
    assert len({h.train_war for h in history}) == 1
    assert np.allclose([h.mean_loss for h in history], history[0].mean_loss, rtol=1e-6)


def test_loss_decreases(small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    _, history = fit(model, X, y, TrainConfig(batch_size=8, epochs=50, lr=0.001, seed=0))
    assert len(history) == 50
    assert history[-1].mean_loss < history[0].mean_loss
    assert all(np.isfinite(h.mean_loss) and 0 <= h.train_war <= 1 for h in history)


def test_batched_gradient_equals_sum_of_per_sample(small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0, dtype=np.float64).eval()
    X64 = X[:6].astype(np.float64)
    z = np.eye(4)[y[:6]]

    def grads(xb, zb):
        model.zero_grad()
        probs, _ = model(Tensor(xb))
        F.cross_entropy(probs, zb).backward()
        return np.concatenate([p.grad.ravel() for _, p in model.trainable_parameters()])

    batched = grads(X64, z) * len(X64)
    looped = sum(grads(X64[i : i + 1], z[i : i + 1]) for i in range(len(X64)))
    assert relative_error(batched, looped) < 1e-6


def test_nan_loss_raises_with_diagnostics(small_data):
    X, y = small_data
    X = X.copy()
    X[9] = np.nan
    model = TimeFrequencyTransformer(small_config(), seed=0)
    cfg = TrainConfig(batch_size=4, epochs=1)
    with pytest.raises(NumericError, match=r"batch \d+.*recent batch losses"):
        train_epoch(model, X, y, make_optimizer(model, cfg), cfg, 1)


def test_target_train_war_stops_early(small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    _, history = fit(model, X, y, TrainConfig(batch_size=8, epochs=30, target_train_war=0.0))
    assert len(history) == 1


# ----------------------------------------------------------------------
# checkpoints, resume, determinism


def test_checkpoint_save_load_save_identical(tmp_path, small_data):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    opt, _ = fit(model, X, y, TrainConfig(batch_size=8, epochs=2))
    checkpoint_save(model, opt, 2, tmp_path / "a.ckpt")
    model2, opt2, epoch = restore(checkpoint_load(tmp_path / "a.ckpt"))
    assert epoch == 2 and opt2.state.step == opt.state.step
    checkpoint_save(model2, opt2, epoch, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupt_checkpoint(tmp_path, small_data):
    model = TimeFrequencyTransformer(small_config(), seed=0)
    checkpoint_save(model, make_optimizer(model, TrainConfig()), 0, tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[200] ^= 0x55
    (tmp_path / "a.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "a.ckpt")


def test_resume_equals_uninterrupted(tmp_path, small_data):
    X, y = small_data
    cfg = TrainConfig(batch_size=8, epochs=3, seed=5)
    full = TimeFrequencyTransformer(small_config(), seed=1)
    fit(full, X, y, cfg)

    first = TimeFrequencyTransformer(small_config(), seed=1)
    fit(first, X, y, TrainConfig(batch_size=8, epochs=2, seed=5, checkpoint_dir=str(tmp_path)))
    model, opt, epoch = restore(checkpoint_load(tmp_path / "last.ckpt"), cfg)
    assert epoch == 2
    fit(model, X, y, cfg, optimizer=opt, start_epoch=epoch)
    assert same_params(params_of(full), params_of(model))


def test_full_run_determinism(tmp_path, small_data):
    X, y = small_data
    rows = []
    for run in ("a", "b"):
        out = tmp_path / run
        model = TimeFrequencyTransformer(small_config(), seed=2)
        cfg = TrainConfig(batch_size=8, epochs=3, seed=2, checkpoint_dir=str(out))
        fit(model, X, y, cfg, log_path=tmp_path / f"{run}.log")
        rows.append((tmp_path / f"{run}.log").read_text().splitlines())
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    assert rows[0][0] == LOG_HEADER
    strip = lambda lines: [line.rsplit(",", 1)[0] for line in lines]
    assert len(rows[0]) == 4 and strip(rows[0]) == strip(rows[1])


def test_log_appends_on_resume(tmp_path, small_data):
    X, y = small_data
    log = tmp_path / "train.log"
    model = TimeFrequencyTransformer(small_config(), seed=0)
    opt, _ = fit(model, X, y, TrainConfig(batch_size=16, epochs=1), log_path=log)
    fit(model, X, y, TrainConfig(batch_size=16, epochs=2), optimizer=opt, start_epoch=1, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == LOG_HEADER and [l.split(",")[0] for l in lines[1:]] == ["1", "2"]


def test_grad_check_mode(small_data, caplog):
    X, y = small_data
    model = TimeFrequencyTransformer(small_config(), seed=0)
    before = params_of(model)
    assert verify_gradients(model, X[:4], y[:4]) < 1e-3
    assert same_params(before, params_of(model))
    with caplog.at_level("INFO", logger="tftransformer.training"):
        fit(model, X, y, TrainConfig(batch_size=8, epochs=2, grad_check_mode=True, eval_every=1))
    assert "gradient check" in caplog.text
    assert caplog.text.count("eval-mode train accuracy") == 2
