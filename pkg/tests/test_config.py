import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmgp.config import ConfigError, format_config, parse_config, parse_config_text
from fedmgp.federation import FederationConfig


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert parse_config(path) == FederationConfig()


def test_comments_aliases_and_types():
    cfg = parse_config_text("""
        # a comment
        groups = 6   # trailing comment
        select_s = 3
        lambda = 0.5
        literal_eq4 = yes
        strategy = fixed
    """)
    assert (cfg.groups, cfg.select_s, cfg.lam, cfg.literal_eq4, cfg.strategy) == (6, 3, 0.5, True, "fixed")


@pytest.mark.parametrize("text, fragment", [
    ("select_s = 7\ngroups = 5", "1 <= s <= groups"),
    ("tau_sel = 0", "tau_sel must be positive"),
])
def test_validation_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


@pytest.mark.parametrize("text, line", [
    ("groups = 5\nbogus = 1", 2),
    ("\n\ngroups five", 3),
    ("rounds = ten", 1),
    ("coupled = maybe", 1),
    ("lr = 0.1\nlr = 0.2", 2),
    ("lr =", 1),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, "x.cfg")
    assert info.value.line == line
    assert f"x.cfg:{line}:" in str(info.value)


def test_unknown_key_message():
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        parse_config_text("bogus = 1")


@given(
    groups=st.integers(1, 8),
    data=st.data(),
    lr=st.floats(1e-6, 10.0),
    coupled=st.booleans(),
    strategy=st.sampled_from(["full", "fixed", "dynamic"]),
)
def test_format_round_trip(groups, data, lr, coupled, strategy):
    cfg = FederationConfig(groups=groups, select_s=data.draw(st.integers(1, groups)), lr=lr, coupled=coupled,
                           strategy=strategy)
    assert parse_config_text(format_config(cfg)) == cfg


def test_base_values_are_kept():
    cfg = parse_config_text("rounds = 3", base={"lr": 0.25})
    assert cfg.rounds == 3 and cfg.lr == 0.25
