import math

from florg_sim.federation import RoundMetrics, run_experiment
from florg_sim.metrics_sink import CsvMetricsSink, format_cell, read_csv, write_csv


def test_format_cell():
    assert format_cell(None) == "undefined"
    assert format_cell(True) == "true"
    assert format_cell(math.nan) == "nan"
    assert format_cell(0.1) == "0.10000000000000001"
    assert float(format_cell(1 / 3)) == 1 / 3
    assert format_cell(12) == "12"


def test_write_csv(tmp_path):
    path = tmp_path / "out.csv"
    count = write_csv(path, ["a", "b"], [(1, None), (2, 0.5)])
    assert count == 2
    assert path.read_text() == "a,b\n1,undefined\n2,0.5\n"


def test_sink_streams_round_metrics(tmp_path, small_config):
    path = tmp_path / "metrics.csv"
    with CsvMetricsSink(path) as sink:
        rows = run_experiment(small_config, sink)

    assert sink.rows == len(rows)
    parsed = read_csv(path)
    assert list(parsed[0]) == RoundMetrics.columns()
    assert [int(row["round"]) for row in parsed] == [1, 2, 3]
    assert float(parsed[-1]["global_loss"]) == rows[-1].global_loss
    assert parsed[0]["eval_accuracy"] == "nan"
