import pytest

from qkdpass.config import ConfigError, build_config, default_config_dict, load_config, write_default_config


def test_defaults_build():
    cfg = build_config()
    assert cfg.profile.max_elevation == 34.1
    assert cfg.source.mu == 0.8
    assert cfg.session.block_size == 500_000
    assert cfg.session.xi == 1e-10


def test_default_file_round_trips(tmp_path):
    path = tmp_path / "pass.toml"
    write_default_config(str(path))
    cfg = load_config(str(path))
    assert cfg.profile.duration == 300.0
    assert cfg.link.receiver_aperture == 0.28


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError, match=r"unknown config section"):
        build_config({"nonsense": {}})
    with pytest.raises(ConfigError, match=r"unknown key 'apature' in section \[link\]"):
        build_config({"link": {"apature": 1.0}})


def test_semantic_errors_surface():
    with pytest.raises(ConfigError):
        build_config({"pass": {"max_elevation": 5.0}})
    with pytest.raises(ConfigError):
        build_config({"source": {"mu": 0.05}})
    with pytest.raises(ConfigError):
        build_config({"protocol": {"block_size": 123}})


def test_toml_syntax_error_carries_position(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[pass\nmax_elevation = 34.1\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(str(path))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/qkd.toml")


def test_default_dict_complete():
    d = default_config_dict()
    assert set(d) == {"pass", "link", "source", "protocol", "channel", "scale"}
