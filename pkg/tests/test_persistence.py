import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tkd import persistence as P
from tkd.data import ColumnRule, PreprocessSpec, RawTable, TemporalDataset, fit_preprocessor, transform
from tkd.distill import SoftLabelMatrix, TeacherRegistry
from tkd.ensemble import EnsembleModel
from tkd.gbt import GbtConfig, fit
from tkd.nn import MlpConfig, train

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def toy(n=120, d=3, seed=0, period=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    return TemporalDataset(period, X, (X[:, 0] + rng.normal(size=n) > 0.5).astype(int))


def models(ds):
    mlp, _ = train(MlpConfig(hidden=(6, 5), batch_size=32, max_epochs=2), ds)
    gbt = fit(GbtConfig(n_estimators=8), ds)
    return mlp, gbt, EnsembleModel([mlp, gbt])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(1, 4)), elements=finite),
       st.integers(0, 50), st.booleans())
def test_dataset_round_trip(tmp_path_factory, X, period, with_labels):
    path = tmp_path_factory.mktemp("ds") / "d.bin"
    Y = (np.arange(X.shape[0]) % 2) if with_labels else None
    ds = TemporalDataset(period, X, Y, [f"f{i}" for i in range(X.shape[1])])
    back = P.load_dataset(P.save_dataset(ds, path))
    assert back.X.tobytes() == ds.X.tobytes() and back.period == period
    assert (back.Y is None) == (Y is None)
    if Y is not None:
        assert np.array_equal(back.Y, ds.Y)
    assert back.feature_names == ds.feature_names


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8)), elements=st.floats(0, 1)))
def test_soft_label_round_trip(tmp_path_factory, p):
    soft = SoftLabelMatrix(1, 3, np.c_[1 - p, p])
    back = P.load_soft_labels(P.save_soft_labels(soft, tmp_path_factory.mktemp("s") / "s.bin"))
    assert back.probs.tobytes() == soft.probs.tobytes()
    assert (back.teacher_period, back.target_period) == (1, 3)


def test_models_round_trip_bit_identical(tmp_path):
    ds = toy()
    X = np.random.default_rng(1).normal(size=(40, 3))
    for model in models(ds):
        back = P.load_model(P.save_model(model, tmp_path / f"{model.kind}.json"))
        assert back.kind == model.kind
        assert back.predict_proba_rows(X).tobytes() == model.predict_proba_rows(X).tobytes()


def test_generic_dispatch(tmp_path):
    ds = toy()
    _, gbt, ens = models(ds)
    reg = TeacherRegistry()
    reg.add(0, gbt)
    reg.add(1, ens)
    P.save(reg, tmp_path / "reg")
    back = P.load(tmp_path / "reg")
    assert back.periods == [0, 1]
    assert back.get(1).predict_proba_rows(ds.X).tobytes() == ens.predict_proba_rows(ds.X).tobytes()
    P.save(ds, tmp_path / "d.bin")
    assert P.load(tmp_path / "d.bin").X.tobytes() == ds.X.tobytes()
    P.save_dataset_dir([ds, toy(period=1, seed=2)], tmp_path / "dd")
    assert [d.period for d in P.load(tmp_path / "dd")] == [0, 1]
    with pytest.raises(P.ArtifactError):
        P.save(object(), tmp_path / "x")


def test_preprocessor_round_trip(tmp_path):
    t = RawTable([("c", "categorical"), ("a", "continuous")],
                 {"c": ["x", None, "y", "x"], "a": [1.0, None, 10.0, 3.0], "t": [0, 0, 0, 1]}, "t")
    spec = PreprocessSpec({"a": ColumnRule(transform="log10", null_fill=-0.001),
                           "c": ColumnRule(encoding="one-hot", freq_threshold=2)})
    prep = fit_preprocessor(t, spec, {0})
    back = P.load_preprocessor(P.save_preprocessor(prep, tmp_path / "p.json"))
    assert back == prep
    for p, ds in transform(t, prep).items():
        assert transform(t, back)[p].X.tobytes() == ds.X.tobytes()


def test_registry_empty_dir_loads_empty(tmp_path):
    assert len(P.load_registry(tmp_path / "nothing")) == 0


def test_truncated_and_corrupt_files(tmp_path):
    path = P.save_dataset(toy(), tmp_path / "d.bin")
    blob = path.read_bytes()
    for cut in (4, 20, len(blob) - 8):
        (tmp_path / "cut.bin").write_bytes(blob[:cut])
        with pytest.raises(P.ArtifactError):
            P.load_dataset(tmp_path / "cut.bin")
    (tmp_path / "extra.bin").write_bytes(blob + b"\0")
    with pytest.raises(P.ArtifactError, match="trailing"):
        P.load_dataset(tmp_path / "extra.bin")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(P.ArtifactError):
        P.load_model(tmp_path / "bad.json")


def test_version_and_kind_checks(tmp_path):
    _, gbt, _ = models(toy())
    path = P.save_model(gbt, tmp_path / "g.json")
    doc = json.loads(path.read_text())
    doc["header"]["schema_version"] = P.SCHEMA_VERSION + 1
    path.write_text(json.dumps(doc))
    with pytest.raises(P.ArtifactError, match="newer"):
        P.load_model(path)
    P.save_preprocessor(fit_preprocessor(RawTable([("a", "continuous")], {"a": [1.0], "t": [0]}, "t"),
                                         PreprocessSpec(), {0}), tmp_path / "p.json")
    with pytest.raises(P.ArtifactError, match="not a model"):
        P.load_model(tmp_path / "p.json")
    with pytest.raises(P.ArtifactError, match="expected"):
        P.load_dataset_dir(tmp_path / "p.json")


def test_writes_are_byte_stable(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    _, gbt, ens = models(toy())
    a = P.save_model(ens, tmp_path / "a" / "m.json").read_bytes()
    b = P.save_model(ens, tmp_path / "b" / "m.json").read_bytes()
    assert a == b
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    doc = json.loads(P.save_model(gbt, tmp_path / "g.json").read_text())
    assert doc["header"]["created"].startswith("1970-01-01")


def test_no_temp_files_left(tmp_path):
    P.save_dataset(toy(), tmp_path / "d.bin")
    assert [p.name for p in tmp_path.iterdir()] == ["d.bin"]
