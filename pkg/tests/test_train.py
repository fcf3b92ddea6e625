import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from repdiff.autodiff import Tensor
from repdiff.schedules import Curriculum, curriculum_weight
from repdiff.train import (
    RECORD_COLUMNS,
    AdamState,
    TrainedModel,
    TrainingDiverged,
    TrainSettings,
    adam_step,
    generate,
    train,
    write_records,
)

from conftest import tiny_setup


def test_adam_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    g = np.array([3.0, -0.2, 1e-3])
    st = AdamState(lr=0.01)
    adam_step(st, p, {"w": g})
    delta = p["w"].data - np.array([1.0, -2.0, 0.5])
    assert np.all(np.abs(delta + 0.01 * np.sign(g)) < 0.01 * 1e-4)
    assert st.step == 1


def test_adam_zero_gradient_no_change():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    adam_step(AdamState(), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, [1.0, 2.0])


def test_adam_rejects_nonfinite_with_name():
    p = {"layer.w": Tensor(np.zeros(2))}
    with pytest.raises(FloatingPointError, match="layer.w"):
        adam_step(AdamState(), p, {"layer.w": np.array([np.nan, 0.0])})


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)})


def test_hundred_steps_bitwise_identical():
    s = tiny_setup(epochs=25, n_train=256, batch=64)  # 4 steps per epoch
    a = train("reed", s, seed=3, evaluate_final=False)
    b = train("reed", s, seed=3, evaluate_final=False)
    pa, pb = a.model.params(), b.model.params()
    assert all(pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)
    assert [r.loss_total for r in a.records] == [r.loss_total for r in b.records]


def test_vanilla_ignores_alignment_weights():
    a = train("vanilla", tiny_setup(lambda_x=0.5), 0, evaluate_final=False)
    b = train("vanilla", tiny_setup(lambda_x=3.0, lambda_y=0.0), 0, evaluate_final=False)
    assert [r.loss_total for r in a.records] == [r.loss_total for r in b.records]
    assert all(r.loss_total == r.loss_diffusion for r in a.records)


def test_curriculum_bookkeeping():
    s = tiny_setup(epochs=5)
    s = replace(s, alpha_c=Curriculum("linear-phase-in", warmup=4, peak=1.0),
                beta_c=Curriculum("cosine-decay", peak=1.0, floor=0.1, horizon=5))
    recs = train("reed", s, 0, evaluate_final=False).records
    assert recs[0].alpha == 0.0
    for r in recs:
        assert r.alpha == curriculum_weight(s.alpha_c, r.epoch)
        assert r.beta == curriculum_weight(s.beta_c, r.epoch)


def test_reed_without_alignment_matches_vanilla_bitwise():
    s = tiny_setup(epochs=3, lambda_x=0.0, lambda_y=0.0)
    s = replace(s, alpha_c=Curriculum("constant"), beta_c=Curriculum("constant"))
    a = train("vanilla", s, 2, evaluate_final=False)
    b = train("reed", s, 2, evaluate_final=False)
    pa, pb = a.model.denoiser.params, b.model.denoiser.params
    assert all(pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)


def test_repa_is_single_level_constant_reed():
    s = tiny_setup(epochs=3)
    s = replace(s, alpha_c=Curriculum("constant"), beta_c=Curriculum("constant"), levels=s.levels[:1])
    a = train("repa", s, 1, evaluate_final=False)
    b = train("reed", s, 1, evaluate_final=False)
    assert [r.loss_total for r in a.records] == [r.loss_total for r in b.records]


def test_two_stage_switch_runs():
    s = tiny_setup(epochs=4)
    s = replace(s, alpha_c=Curriculum("step-up", warmup=2, peak=1.0, floor=0.0),
                beta_c=Curriculum("step-down", warmup=2, peak=1.0, floor=0.0))
    recs = train("reed", s, 0, evaluate_final=False).records
    assert [(r.alpha, r.beta) for r in recs] == [(0.0, 1.0), (0.0, 1.0), (1.0, 0.0), (1.0, 0.0)]


def test_rcg_fits_prior_and_samples():
    res = train("rcg", tiny_setup(epochs=2), 0)
    assert res.model.prior is not None and res.model.prior.fitted
    assert np.isfinite(res.final.sliced_wasserstein)


def test_exact_elbo_logs_lognorm():
    res = train("exact-elbo", tiny_setup(epochs=2), 0)
    assert all(r.loss_lognorm >= 0 for r in res.records)
    assert math.isfinite(res.final.alignment_cosine)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_snapshot():
    s = replace(tiny_setup(epochs=3), train=TrainSettings(epochs=3, batch_size=64, lr=1e200))
    with pytest.raises(TrainingDiverged) as info:
        train("vanilla", s, 0, evaluate_final=False)
    snap = info.value.snapshot
    assert snap and all(np.all(np.isfinite(v)) for v in snap.values())


def test_unknown_mode():
    with pytest.raises(ValueError):
        train("cfg", tiny_setup(), 0)


def test_checkpoint_roundtrip_reproduces_samples(tmp_path):
    s = tiny_setup(epochs=2)
    for mode in ("reed", "rcg", "exact-elbo"):
        res = train(mode, s, 0, evaluate_final=False)
        path = tmp_path / f"{mode}.ckpt"
        res.model.save(path, {"note": "x"})
        loaded, meta = TrainedModel.load(path)
        assert meta["note"] == "x" and meta["mode"] == mode
        a = generate(res.model, s, 32, seed=5)
        b = generate(loaded, s, 32, seed=5)
        assert a.tobytes() == b.tobytes()


def test_records_csv_layout(tmp_path):
    recs = train("reed", tiny_setup(epochs=2), 0).records
    path = tmp_path / "r.csv"
    write_records(path, recs, "abc123")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    rows = list(csv.reader(lines[1:]))
    assert tuple(rows[0]) == RECORD_COLUMNS
    assert len(rows) == 1 + len(recs)
    write_records(path, recs, "abc123", include_wall_time=False)
    header = path.read_text().splitlines()[1].split(",")
    assert "wall_time" not in header
