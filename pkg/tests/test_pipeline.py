import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from waam_pino import pipeline
from waam_pino.config import GenConfig, RunConfig
from waam_pino.fields import GridGeometry
from waam_pino.metrics import validate_report
from waam_pino.models import ModelSpec, build_model
from waam_pino.pipeline import (Checkpoint, TrainingDiverged, ablate, evaluate, evaluate_persistence,
                                evaluate_with, generate_dataset, predict, split_samples, train)

SPEC = ModelSpec(kind="pideeponet_rnn", window_i=8, horizon_m=4, enc_channels=(2, 4),
                 lstm_layers=1, lstm_hidden=4, cnn_width=4)


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    cfg = GenConfig(geometry=GridGeometry(8, 12), train_cases=[1], test_cases=[8], n_layers=2,
                    dwell=6.0)
    return generate_dataset(cfg, tmp_path_factory.mktemp("tiny"))


def _cfg(ds, **kw):
    return replace(RunConfig(dataset=str(ds.root), model=SPEC, epochs=2, batch_size=8), **kw)


def test_zero_epochs_keeps_initialization(tiny_ds):
    res = train(_cfg(tiny_ds, epochs=0), tiny_ds)
    init = build_model(SPEC, seed=0).state_dict()
    assert res.trace == []
    assert all(torch.equal(res.checkpoint.state[k], init[k]) for k in init)


def test_fixed_seed_gives_identical_traces(tiny_ds):
    a = train(_cfg(tiny_ds, seed=4), tiny_ds)
    b = train(_cfg(tiny_ds, seed=4), tiny_ds)
    c = train(_cfg(tiny_ds, seed=5), tiny_ds)
    assert a.trace == b.trace
    assert a.trace != c.trace
    assert set(a.trace[0]) == {"total", "data", "trunk", "pde"}
    assert a.trace[0]["pde"] > 0
    assert a.checkpoint.meta["dataset_hash"] == tiny_ds.content_hash()


def test_loss_terms_follow_kind(tiny_ds):
    cnn = ModelSpec.from_dict({**SPEC.to_dict(), "kind": "cnn", "beta": None, "lam": None})
    res = train(_cfg(tiny_ds, model=cnn, epochs=1), tiny_ds)
    assert res.trace[0]["trunk"] == 0.0 and res.trace[0]["pde"] == 0.0


def test_non_finite_loss_aborts(tiny_ds, monkeypatch):
    real = pipeline.batch_losses

    def broken(*a, **kw):
        terms = real(*a, **kw)
        terms["total"] = terms["total"] * float("nan")
        return terms

    monkeypatch.setattr(pipeline, "batch_losses", broken)
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        train(_cfg(tiny_ds), tiny_ds)


def test_split_hygiene(tiny_ds):
    train_keys = {(s.case_id, s.anchor) for s in split_samples(tiny_ds, "train", SPEC, "Uz", 1)}
    test_keys = {(s.case_id, s.anchor) for s in split_samples(tiny_ds, "test", SPEC, "Uz", 1)}
    assert train_keys and test_keys and not train_keys & test_keys


def test_truth_as_prediction_is_zero_error(tiny_ds):
    rep = evaluate_with(lambda batch, _: {"u_hat": batch["u_fut"].numpy()}, tiny_ds, SPEC, "z",
                        stride=1)
    assert rep.mae == [0.0] * len(rep.segments)
    assert rep.max_abs == [0.0] * len(rep.segments)
    assert all(v == 0.0 for v in rep.mse_curve)
    assert all(v == pytest.approx(1.0) for v in rep.ssim_curve)


def test_persistence_baseline_is_finite_and_nonzero(tiny_ds):
    rep = evaluate_persistence(tiny_ds, SPEC, "z", stride=1)
    assert np.all(np.isfinite(rep.mae)) and max(rep.mae) > 0
    validate_report(rep.to_dict())


def test_checkpoint_roundtrip_and_eval(tiny_ds, tmp_path):
    res = train(_cfg(tiny_ds, epochs=1), tiny_ds)
    res.checkpoint.save(tmp_path / "checkpoint.bin")
    back = Checkpoint.load(tmp_path / "checkpoint.bin")
    assert back.spec == SPEC and back.target == "Uz" and back.geometry == tiny_ds.geometry
    assert back.stats.to_dict() == tiny_ds.stats.to_dict()
    rep = evaluate(back, tiny_ds, stride=2)
    doc = rep.to_dict()
    validate_report(doc)
    assert doc["residual"]["n_valid"] > 0
    assert doc["metadata"]["model_kind"] == "pideeponet_rnn"


def test_geometry_mismatch(tiny_ds):
    res = train(_cfg(tiny_ds, epochs=0), tiny_ds)
    ckpt = replace(res.checkpoint, geometry=GridGeometry(8, 13))
    with pytest.raises(ValueError, match="geometry"):
        evaluate(ckpt, tiny_ds)


def test_predict_contract(tiny_ds):
    ckpt = train(_cfg(tiny_ds, epochs=0), tiny_ds).checkpoint
    case = tiny_ds.split("test")[0]
    hist = case.data[:10].astype(np.float64)
    fut = case.data[10:14, 3] > 0.5
    p1 = predict(ckpt, hist, repeats=2, future_active=fut)
    p2 = predict(ckpt, hist, repeats=2, future_active=fut)
    assert p1.u_hat.shape == (4, 8, 12) and p1.t_hat.shape == (4, 8, 12)
    assert np.array_equal(p1.u_hat, p2.u_hat)
    assert np.all(p1.u_hat[~fut] == pytest.approx(0.0, abs=1e-12))
    assert p1.latency_ms > 0
    with pytest.raises(ValueError):
        predict(ckpt, hist[:, :3])
    bad = hist.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        predict(ckpt, bad)


def test_ablation_table(tiny_ds, tmp_path):
    cfg = _cfg(tiny_ds, epochs=1, eval_stride=4)
    table = ablate(cfg, tiny_ds, tmp_path, latency_repeats=1)
    rows = table["rows"]
    assert [r["kind"] for r in rows] == ["cnn", "st_convlstm", "deeponet_rnn", "pideeponet_rnn"]
    assert len({r["dataset_hash"] for r in rows}) == 1 and len({r["seed"] for r in rows}) == 1
    assert all(r["train_time_s"] > 0 and r["predict_latency_ms"] > 0 for r in rows)
    assert rows[0]["pde_residual"] is None and rows[3]["pde_residual"] is not None
    saved = json.loads((tmp_path / "ablation.json").read_text())
    assert set(saved["curves"]) == set(cfg.kinds)
    csv = (tmp_path / "ablation.csv").read_text().strip().split("\n")
    assert len(csv) == 1 + 4 * len(rows[0]["segments"])
    for kind in cfg.kinds:
        validate_report(json.loads((tmp_path / kind / "report.json").read_text()))
