import pytest
import numpy as np
from app import utils


def test_format_duration():
    assert utils.format_duration(75.5) == "1m 15s"
    assert utils.format_duration(4.2) == "4.2s"


def test_format_duration_error():
    assert utils.format_duration("string") == "Unknown duration"  # type: ignore
    assert utils.format_duration(-1) == "Unknown duration"


def test_make_rng_is_keyed():
    a = utils.make_rng(1, 2).normal(size=5)
    assert np.array_equal(a, utils.make_rng(1, 2).normal(size=5))
    assert not np.array_equal(a, utils.make_rng(2, 1).normal(size=5))
    with pytest.raises(ValueError):
        utils.make_rng()


def test_derive_seed_range():
    seeds = {utils.derive_seed(0, i) for i in range(100)}
    assert len(seeds) == 100
    assert all(0 <= s < 2**63 for s in seeds)
    assert utils.derive_seed(3, 4) == utils.derive_seed(3, 4)


def test_pairwise_sum_order_depends_only_on_length():
    # ((a + b) + (c + d)) rather than (((a + b) + c) + d)
    items = [1e16, 1.0, -1e16, 1.0]
    assert utils.pairwise_sum(items) == (1e16 + 1.0) + (-1e16 + 1.0)
    assert utils.pairwise_sum([np.ones(2), np.ones(2), np.ones(2)]).tolist() == [3.0, 3.0]
    assert utils.pairwise_sum(["a", "b", "c"]) == "abc"
    with pytest.raises(ValueError):
        utils.pairwise_sum([])


def test_pairwise_sum_custom_combine():
    assert utils.pairwise_sum([1, 2, 3, 4], add=max) == 4


def test_hashing_helpers():
    assert utils.canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    assert utils.sha256_json({"b": 1, "a": 2}) == utils.sha256_json({"a": 2, "b": 1})
    assert utils.sha256_json("abc") == "6cc43f858fbb763301637b5af970e2a46b46f461f27e5a0f41e009c59b827b25"


def test_log_event_and_show_logs(isolated_app_home, capsys):
    utils.log_event("WARN", "  something odd  \n")

    files = list((isolated_app_home / "logs" / "app").glob("*_daily.log"))
    assert len(files) == 1
    text = files[0].read_text()
    assert " WARN " in text and "something odd\n" in text

    utils.show_logs(10)
    assert "something odd" in capsys.readouterr().out


def test_show_logs_without_files(capsys):
    utils.show_logs(5)
    assert "No log files found" in capsys.readouterr().out


@pytest.mark.parametrize("kind, icon", [("ok", "✓"), ("fail", "✗"), ("warn", "⚠"), ("info", "●")])
def test_status_line(capsys, kind, icon):
    utils.status_line(kind, "label", "details")
    out = capsys.readouterr().out
    assert icon in out and "label" in out and "details" in out
