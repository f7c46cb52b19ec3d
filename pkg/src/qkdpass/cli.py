"""Command-line entry points.

    qkdpass run-pass  [--config PATH] --seed N --out DIR [--block-size BITS]
                      [--loss-prob P] [--format {json,csv}]
    qkdpass analyze   TALLY_JSON [--xi XI] [--out PATH]
    qkdpass relay     KEYFILE_A KEYFILE_B MESSAGE_FILE --out DIR

All randomness flows from the single --seed; identical invocations produce
byte-identical outputs.  QKDPASS_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional

from . import relay as relay_mod
from .config import ConfigError, build_config, load_config
from .finitekey import DecoyTally, analyze_block, block_report
from .pipeline import run_pass
from .protocol import BLOCK_SIZES, read_key_file
from .source import CLASS_NAMES, SourceParams

log = logging.getLogger("qkdpass")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_REJECT = 4


def _setup_logging() -> None:
    level = os.environ.get("QKDPASS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def cmd_run_pass(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config) if args.config else build_config()
        overrides = {}
        if args.block_size is not None:
            if args.block_size not in BLOCK_SIZES:
                raise ConfigError(f"--block-size must be one of {BLOCK_SIZES}")
            config = replace(config, session=replace(config.session, block_size=args.block_size))
        if args.loss_prob is not None:
            config = replace(config, channel=replace(config.channel, frame_loss_prob=args.loss_prob))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    result = run_pass(config, args.seed, args.out)
    if args.format == "json":
        print(json.dumps(result.summary, indent=2, sort_keys=True))
    else:
        for key in sorted(result.summary):
            if key != "calibration":
                print(f"{key},{result.summary[key]}")
    log.info("pass complete: %s", result.summary["outcome"])
    if result.summary["outcome"] == "aborted":
        return EXIT_ABORT
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    try:
        with open(args.tally) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read tally: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        tally = DecoyTally(
            {c: int(data["sent"][c]) for c in CLASS_NAMES},
            {c: int(data["detected"][c]) for c in CLASS_NAMES},
            {c: int(data["errors"][c]) for c in CLASS_NAMES},
        )
        source = SourceParams(**data.get("source", {}))
        xi = args.xi if args.xi is not None else float(data.get("xi", 1e-10))
        lec = float(data.get("lec", 0.0))
        fraction = float(data.get("sifted_fraction", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        print(f"malformed tally: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    result = analyze_block(tally, source, xi=xi, lec=lec, sifted_fraction=fraction)
    report = block_report(data.get("block_id", 0), tally, result, xi)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_relay(args: argparse.Namespace) -> int:
    try:
        _, keys_a = read_key_file(args.keyfile_a)
        _, keys_b = read_key_file(args.keyfile_b)
        with open(args.message, "rb") as fh:
            message = fh.read()
    except (OSError, ValueError) as exc:
        print(f"cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def concat(keys) -> bytes:
        # Bit-level concatenation, floored to whole bytes: block padding or
        # a partial tail byte must never enter the one-time-pad pool as
        # known-zero key material.
        import numpy as np

        from .privacy import pack_key_bits, unpack_key_bits

        chunks = [unpack_key_bits(data, nbits) for nbits, data in (keys[b] for b in sorted(keys))]
        if not chunks:
            return b""
        bits = np.concatenate(chunks)
        usable = (len(bits) // 8) * 8
        return pack_key_bits(bits[:usable])

    mj_sat = relay_mod.StationKey("satellite-mj", concat(keys_a), pass_id=1)
    mn_sat = relay_mod.StationKey("satellite-mn", concat(keys_b), pass_id=2)
    mj_station = relay_mod.StationKey("station-a", concat(keys_a), pass_id=1)
    mn_station = relay_mod.StationKey("station-b", concat(keys_b), pass_id=2)

    try:
        combined, truncated = relay_mod.relay_combine(mj_sat, mn_sat)
        recovered = relay_mod.recover_key(combined, mn_station)
        mj_recovered = relay_mod.StationKey("station-b-mj", recovered, pass_id=1)
        ciphertext = relay_mod.otp_encrypt(message, mj_station)
        plaintext = relay_mod.otp_decrypt(ciphertext, mj_recovered)
    except relay_mod.KeyExhaustedError as exc:
        print(f"relay refused: {exc}", file=sys.stderr)
        return EXIT_REJECT

    if plaintext != message:
        print("relay round trip failed", file=sys.stderr)
        return EXIT_REJECT

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ciphertext.bin"), "wb") as fh:
        fh.write(ciphertext)
    transcript = relay_mod.relay_transcript(
        orbit_a=1, orbit_b=2, bits_relayed=8 * len(combined),
        pass_time_a=0.0, pass_time_b=5400.0,
        truncated_bits=truncated,
    )
    transcript["message_bits"] = 8 * len(message)
    relay_mod.write_transcript(os.path.join(args.out, "relay.json"), transcript)
    print(json.dumps(transcript, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdpass", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run-pass", help="simulate one satellite pass end to end")
    p_run.add_argument("--config", help="TOML config path (defaults built in)")
    p_run.add_argument("--seed", type=int, required=True)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--block-size", type=int, default=None)
    p_run.add_argument("--loss-prob", type=float, default=None)
    p_run.add_argument("--format", choices=("json", "csv"), default="json")
    p_run.set_defaults(func=cmd_run_pass)

    p_an = sub.add_parser("analyze", help="finite-key analysis of a tally JSON")
    p_an.add_argument("tally")
    p_an.add_argument("--xi", type=float, default=None)
    p_an.add_argument("--out", default=None)
    p_an.set_defaults(func=cmd_analyze)

    p_rel = sub.add_parser("relay", help="two-orbit trusted relay of two key files")
    p_rel.add_argument("keyfile_a")
    p_rel.add_argument("keyfile_b")
    p_rel.add_argument("message")
    p_rel.add_argument("--out", required=True)
    p_rel.set_defaults(func=cmd_relay)
    return parser


def main(argv: Optional[list] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
