import json

import pytest
from hypothesis import given, settings, strategies as st

from snnsweep.errors import ConfigError, InputError
from snnsweep.network import NetworkConfig
from snnsweep.runlog import (CONFIG_FILE, LOG_FILE, TRACE_FILE, RunWriter, format_config, load_trace,
                             parse_config, read_config_file, read_header)
from snnsweep.stbp import EpochRecord, Hyperparams


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 100), st.floats(1e-6, 1.0), st.floats(0.01, 2.0), st.floats(0.0, 5.0),
       st.integers(1, 20), st.booleans())
def test_config_round_trip(B, lr, v_th, wd, T, decoupled):
    hp = Hyperparams(batch_size=B, learning_rate=lr, v_th=v_th, weight_decay=wd, timesteps=T,
                     decoupled_weight_decay=decoupled)
    assert Hyperparams().with_values(**parse_config(format_config(hp))) == hp


def test_parse_config_aliases_and_comments():
    text = "# header\n\nB = 20   # batch\nlr=7.5e-3\nV_th = 0.5\n"
    assert parse_config(text) == {"batch_size": "20", "learning_rate": "7.5e-3", "v_th": "0.5"}


@pytest.mark.parametrize("text,lineno", [("lr = 1e-3\nno equals\n", 2), ("= 3\n", 1), ("lr =\n", 1),
                                         ("lr = 1\nmomentum = 0.9\n", 2)])
def test_parse_config_errors_name_line(text, lineno):
    with pytest.raises(ConfigError, match=f"cfg:{lineno}:"):
        parse_config(text, "cfg")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        read_config_file(tmp_path / "absent.txt")


def test_run_writer_files(tmp_path):
    hp = Hyperparams(epochs=2, seed=5)
    w = RunWriter(tmp_path, hp, NetworkConfig(), extra={"data": "x"})
    w(EpochRecord(1, 0.3, 50.0, 55.0, 1.25))
    w(EpochRecord(2, 0.2, 60.0, 65.0, 2.5))
    trace = load_trace(tmp_path)
    assert trace.test_acc == [55.0, 65.0]
    assert [r.seconds for r in trace] == [1.25, 2.5]
    header = read_header(tmp_path)
    assert header["hyperparams"] == hp.to_dict()
    assert header["network"]["init_gain"] == NetworkConfig().init_gain
    assert header["lif"]["v_th"] == hp.v_th
    assert header["data"] == "x"
    lines = [json.loads(l) for l in (tmp_path / LOG_FILE).read_text().splitlines()]
    assert [l["type"] for l in lines] == ["header", "epoch", "epoch"]
    assert read_config_file(tmp_path / CONFIG_FILE) == {k: str(v) for k, v in hp.to_dict().items()}


def test_deterministic_trace_zeroes_seconds_only_in_csv(tmp_path):
    w = RunWriter(tmp_path, Hyperparams(), NetworkConfig(), deterministic_trace=True)
    w(EpochRecord(1, 0.3, 50.0, 55.0, 1.25))
    assert load_trace(tmp_path).rows[0].seconds == 0.0
    last = json.loads((tmp_path / LOG_FILE).read_text().splitlines()[-1])
    assert last["seconds"] == 1.25


def test_load_trace_missing(tmp_path):
    with pytest.raises(InputError, match=TRACE_FILE):
        load_trace(tmp_path)
