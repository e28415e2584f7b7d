import numpy as np
import pytest

from mlnet.errors import DomainError, ParseError
from mlnet.objectives import LossWeights
from mlnet.scenario import ScenarioSpec
from mlnet.training import TRACE_HEADER, RunConfig, sweep, train_run


def small_config(**changes) -> RunConfig:
    cfg = RunConfig(scenario=ScenarioSpec(2, 1, 1, dim=4, samples_per_class_source=12,
                                          samples_per_class_target=12, seed=0),
                    epochs=3, batch=8, hidden=(8,), feat_dim=6)
    return cfg.replace(**changes)


def test_same_seed_same_trace():
    a, b = train_run(small_config()), train_run(small_config())
    assert a.trace == b.trace
    c = train_run(small_config(seed=1))
    assert c.trace != a.trace


def test_trace_shape_and_nil_gating():
    arts = train_run(small_config())
    iters = 36 // 8
    assert len(arts.trace) == 3 * iters
    assert [r[1] for r in arts.trace] == [1] * iters + [2] * iters + [3] * iters
    nil = arts.trace_column("l_nil")
    assert np.all(nil[:iters] == 0) and np.all(nil[iters:] > 0)
    lr = arts.trace_column("lr")
    assert lr[0] == 0.001 and np.all(np.diff(lr) < 0)


def test_zero_weights_equal_baseline_run():
    zero = train_run(small_config(beta1=0.0, beta2=0.0, eta=0.0))
    for name in ("l_nil", "l_cmm", "l_cc"):
        assert np.all(zero.trace_column(name) == 0)
    # the same run with the auxiliary terms switched off structurally
    off = train_run(small_config(beta1=0.0, beta2=0.0, eta=0.0, mixup="off"))
    assert zero.trace == off.trace


ABLATIONS = {
    "w/o NIL": ({"beta1": 0.0}, ["l_nil"]),
    "w/o CMM": ({"beta2": 0.0}, ["l_cmm"]),
    "w/o CC": ({"eta": 0.0}, ["l_cc"]),
    "w/o Conf": ({"use_confidence": False}, []),
    "w/ KNN": ({"neighborhood": "knn"}, []),
    "w/ SMM": ({"mixup": "source"}, []),
    "full": ({}, []),
}


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_matrix(name):
    changes, inactive = ABLATIONS[name]
    arts = train_run(small_config(**changes))
    for col in ("l_nil", "l_cmm", "l_cc"):
        values = arts.trace_column(col)
        if col in inactive:
            assert np.all(values == 0), col
        else:
            assert np.any(values != 0), col


def test_ablations_change_the_run():
    full = train_run(small_config())
    for changes in ({"use_confidence": False}, {"neighborhood": "knn"}, {"mixup": "source"}):
        assert train_run(small_config(**changes)).trace != full.trace


def test_artifacts_written(tmp_path):
    arts = train_run(small_config(out=str(tmp_path)))
    for key in ("trace", "metrics", "curve", "checkpoint", "config"):
        assert arts.paths[key].exists()
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == ",".join(TRACE_HEADER)


def test_resolved_config_reproduces_run(tmp_path):
    cfg = small_config(out=str(tmp_path / "a"), epsilon=0.8, beta2=0.2)
    train_run(cfg)
    echo = RunConfig.from_file(tmp_path / "a" / "config.resolved.cfg")
    echo.out = str(tmp_path / "b")
    train_run(echo)
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert echo.to_text().replace("/b", "/a") == cfg.to_text()


def test_config_validation():
    with pytest.raises(DomainError):
        small_config(epochs=0).validate()
    with pytest.raises(DomainError):
        RunConfig().validate()
    with pytest.raises(DomainError):
        RunConfig(data=["/nonexistent.csv"], split=(1, 0, 0)).validate()
    with pytest.raises(DomainError):
        small_config(batch=100).replace(epochs=1) and train_run(small_config(batch=100))


def test_config_text_errors():
    with pytest.raises(ParseError):
        RunConfig.from_text("[loss]\nbeta9 = 1\n")
    with pytest.raises(ParseError):
        RunConfig.from_text("[nonsense]\na = 1\n")
    with pytest.raises(ParseError):
        RunConfig.from_text("[train]\nepochs = many\n")
    with pytest.raises(ParseError):
        RunConfig.from_text("not an ini file")


def test_divergence_dumps_batch(tmp_path):
    from mlnet.training import DivergenceError
    cfg = small_config(out=str(tmp_path), lr_heads=1e200, lr_extractor=1e200, epochs=2)
    with pytest.raises(DivergenceError) as info:
        train_run(cfg)
    assert info.value.dump_path is not None and info.value.dump_path.exists()


def test_sweep_single_point_matches_run(tmp_path):
    cfg = small_config()
    rows = sweep(cfg, {"beta2": [cfg.weights.beta2]}, out=tmp_path)
    single = train_run(small_config())
    assert len(rows) == 1 and rows[0][5] == "ok"
    assert rows[0][8] == repr(single.report.h_score)
    assert (tmp_path / "sweep.csv").exists()


def test_sweep_grid_bookkeeping():
    cfg = small_config(epochs=1)
    rows = sweep(cfg, {"beta2": [0.0, 0.1, 0.2], "eta": [0.0, 0.16, 0.3]})
    assert len(rows) == 9
    assert {(r[2], r[3]) for r in rows} == {(repr(b), repr(e)) for b in (0.0, 0.1, 0.2) for e in (0.0, 0.16, 0.3)}
    assert all(r[5] == "ok" for r in rows)
    # the default point reproduces a standalone default run
    default = [r for r in rows if r[2] == "0.1" and r[3] == "0.16"][0]
    assert default[6:] == [repr(v) for v in (lambda m: (m.a_known, m.a_unknown, m.h_score, m.accuracy, m.ucr))(
        train_run(small_config(epochs=1)).report)]


def test_sweep_records_failures():
    cfg = small_config(epochs=1)
    rows = sweep(cfg, {"epsilon": [0.9, 0.0]})
    assert rows[0][5] == "ok"
    assert rows[1][5].startswith("failed") and rows[1][6:] == [""] * 5


def test_sweep_seeds_and_workers():
    cfg = small_config(epochs=1)
    serial = sweep(cfg, {"seed": [0, 1]})
    parallel = sweep(cfg, {"seed": [0, 1]}, workers=2)
    assert [r[1] for r in serial] == [0, 1]
    assert serial == parallel


def test_loss_weights_in_config_text():
    cfg = RunConfig.from_text(small_config().to_text() + "\n")
    assert cfg.weights == LossWeights()
