import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnreach.config import ConfigError, format_config, parse_config, write_atomic


def test_parse_skips_comments_and_keeps_order():
    cfg = parse_config("# head\nb.x = 1\n\na.y =  two words \n")
    assert list(cfg.items()) == [("b.x", "1"), ("a.y", "two words")]


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("a = 1\na = 2\n")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError):
        parse_config("just text\n")


keys = st.from_regex(r"[a-z]{1,5}(\.[a-z_0-9]{1,5}){0,2}", fullmatch=True)
values = st.from_regex(r"[A-Za-z0-9\[\],.\- ]{0,20}", fullmatch=True).map(str.strip)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(keys, values, max_size=8))
def test_round_trip(items):
    assert parse_config(format_config(items)) == items


def test_write_atomic(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    write_atomic(str(p), "hello\n")
    assert p.read_text() == "hello\n"
    assert [f for f in os.listdir(p.parent) if f.startswith(".tmp")] == []
