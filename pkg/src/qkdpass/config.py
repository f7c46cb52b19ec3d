"""TOML configuration for pass runs.

Sections: [pass] geometry, [link] budget parameters, [source] intensities
and probabilities, [protocol] distillation settings, [channel] classical
channel behaviour, [scale] desk-scale knobs.  Unknown keys are rejected
with the offending section and key named.
"""

from __future__ import annotations

import sys
from typing import Any, Dict, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .link import LinkBudgetParams, PassProfile, PULSE_RATE
from .pipeline import PassRunConfig
from .protocol import ChannelParams, SessionConfig
from .source import SourceParams


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "pass": {
        "max_elevation": "max_elevation",
        "start_epoch": "start_epoch",
        "duration": "duration",
        "orbit_altitude": "orbit_altitude",
        "timestep": "timestep",
    },
    "link": {
        "divergence_full_angle": "divergence_full_angle",
        "receiver_aperture": "receiver_aperture",
        "ogs_efficiency": "ogs_efficiency",
        "detector_efficiency": "detector_efficiency",
        "pointing_jitter_rms": "pointing_jitter_rms",
        "atmospheric_zenith_loss_db": "atmospheric_zenith_loss_db",
        "dark_count_rate": "dark_count_rate",
        "gate_width": "gate_width",
        "gate_signal_efficiency": "gate_signal_efficiency",
        "background_rate": None,
    },
    "source": {
        "mu": "mu",
        "nu": "nu",
        "w": "w",
        "p_signal": "p_signal",
        "p_decoy": "p_decoy",
        "p_vacuum": "p_vacuum",
        "intrinsic_contrast_db": "intrinsic_contrast_db",
    },
    "protocol": {
        "block_size": "block_size",
        "sample_fraction": "sample_fraction",
        "xi": "xi",
        "batch_detections": "batch_detections",
        "session_timeout": "session_timeout",
        "auth_messages": "auth_messages",
        "pulse_rate": None,
    },
    "channel": {
        "frame_loss_prob": "frame_loss_prob",
        "latency": "latency",
        "repeat_interval": "repeat_interval",
        "corrupt_prob": "corrupt_prob",
    },
    "scale": {"calibration_pulses": None},
}


def default_config_dict() -> Dict[str, Dict[str, Any]]:
    """Reference defaults: a 34.1-degree-max-elevation 300 s night pass
    tuned to yield about twenty 100-kbit sifted packets at ~1% QBER."""
    return {
        "pass": {
            "max_elevation": 34.1,
            "start_epoch": 0.0,
            "duration": 300.0,
            "orbit_altitude": 500e3,
            "timestep": 1.0,
        },
        "link": {
            "divergence_full_angle": 10e-6,
            "receiver_aperture": 0.28,
            "ogs_efficiency": 0.49,
            "detector_efficiency": 0.60,
            "pointing_jitter_rms": 1.0e-6,
            "atmospheric_zenith_loss_db": 2.0,
            "dark_count_rate": 50.0,
            "gate_width": 800e-12,
            "gate_signal_efficiency": 0.80,
            "background_rate": 450.0,
        },
        "source": {
            "mu": 0.8,
            "nu": 0.1,
            "w": 0.001,
            "p_signal": 0.5,
            "p_decoy": 0.25,
            "p_vacuum": 0.25,
            "intrinsic_contrast_db": 25.0,
        },
        "protocol": {
            "block_size": 500_000,
            "sample_fraction": 0.10,
            "xi": 1e-10,
            "batch_detections": 250_000,
            "session_timeout": 600.0,
            "auth_messages": 160,
            "pulse_rate": PULSE_RATE,
        },
        "channel": {
            "frame_loss_prob": 0.0,
            "latency": 0.02,
            "repeat_interval": 0.1,
            "corrupt_prob": 0.0,
        },
        "scale": {"calibration_pulses": 10_000_000},
    }


def _merge(defaults: Dict[str, Dict[str, Any]], overrides: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    merged = {section: dict(values) for section, values in defaults.items()}
    for section, values in overrides.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"section [{section}] must be a table")
        for key, value in values.items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            merged[section][key] = value
    return merged


def build_config(overrides: Optional[Mapping[str, Any]] = None) -> PassRunConfig:
    merged = _merge(default_config_dict(), overrides or {})
    try:
        profile = PassProfile(**merged["pass"])
        link_kwargs = dict(merged["link"])
        background = float(link_kwargs.pop("background_rate"))
        link = LinkBudgetParams(**link_kwargs)
        source = SourceParams(**merged["source"])
        proto = dict(merged["protocol"])
        pulse_rate = float(proto.pop("pulse_rate"))
        session = SessionConfig(source=source, **proto)
        channel = ChannelParams(**merged["channel"])
        return PassRunConfig(
            profile=profile,
            link=link,
            source=source,
            background_rate=background,
            pulse_rate=pulse_rate,
            channel=channel,
            session=session,
            calibration_pulses=int(merged["scale"]["calibration_pulses"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> PassRunConfig:
    """Parse and validate a TOML config file.

    TOML syntax errors carry line/column positions from the parser;
    semantic errors name the section and key.
    """
    try:
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(data)


def write_default_config(path: str) -> None:
    cfg = default_config_dict()
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
