"""Command-line client for the forecasting service.

One binary, subcommand per pipeline stage:

    mefcast ingest | derive | profile | synth | train | predict |
            evaluate | sensitivity | nowcast

Each subcommand reads local files, calls the HTTP service (an in-process
instance by default, or a remote one via ``--server``/``MEFCAST_SERVER``),
and writes outputs atomically alongside a run manifest recording the config
hash, seeds, and package versions.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import json
import os
import platform
import sys
import tempfile
from datetime import date
from pathlib import Path

import httpx
import numpy as np

from . import __version__
from .config import RunConfig
from .errors import MefcastError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_EXIT_BY_KIND = {"usage": EXIT_USAGE, "data": EXIT_DATA, "numeric": EXIT_NUMERIC}

SERVER_ENV = "MEFCAST_SERVER"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to code 1."""

    def error(self, message):
        raise CliError(f"{self.prog}: error: {message}\n{self.format_usage()}", EXIT_USAGE)


# ---------------------------------------------------------------------------
# Service client
# ---------------------------------------------------------------------------


class ServiceClient:
    """POSTs to a remote server when given one, else to the in-process app."""

    def __init__(self, server: str | None):
        self.server = server or os.environ.get(SERVER_ENV) or None

    def post(self, path: str, payload: dict) -> dict:
        if self.server:
            try:
                with httpx.Client(base_url=self.server, timeout=None) as client:
                    response = client.post(path, json=payload)
            except httpx.HTTPError as exc:
                raise CliError(f"cannot reach server {self.server}: {exc}", EXIT_DATA) from exc
        else:
            response = self._post_in_process(path, payload)
        if response.status_code == 200:
            return response.json()
        raise CliError(*self._error_from(response))

    @staticmethod
    def _post_in_process(path: str, payload: dict) -> httpx.Response:
        from .service.app import create_app

        transport = httpx.ASGITransport(app=create_app())

        async def _go() -> httpx.Response:
            async with httpx.AsyncClient(
                transport=transport, base_url="http://mefcast.local", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        return asyncio.run(_go())

    @staticmethod
    def _error_from(response: httpx.Response) -> tuple[str, int]:
        try:
            body = response.json()
        except ValueError:
            body = {}
        detail = body.get("detail", response.text or f"HTTP {response.status_code}")
        kind = body.get("kind")
        if kind in _EXIT_BY_KIND:
            code = _EXIT_BY_KIND[kind]
        elif response.status_code in (400, 404):
            code = EXIT_USAGE
        elif response.status_code == 422:
            code = EXIT_DATA
        else:
            code = EXIT_NUMERIC
        if not isinstance(detail, str):
            detail = json.dumps(detail)
        return f"service error: {detail}", code


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> None:
    """Write via a temp file in the target directory plus rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent or "."), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc


def _read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from exc


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_manifest(out_path: Path, command: str, config: RunConfig) -> None:
    manifest = {
        "command": command,
        "config_hash": config.config_hash(),
        "seeds": {
            "model": config.model.seed,
            "train": config.train.seed,
            "synth": config.synth.seed,
        },
        "versions": {
            "mefcast": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    atomic_write(Path(str(out_path) + ".manifest.json"), _dump_json(manifest))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="mefcast", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mefcast {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration JSON document")
    common.add_argument("--seed", type=int, help="override model/train/synth seeds")
    common.add_argument("--server", metavar="URL", help=f"remote service URL (default: ${SERVER_ENV} or in-process)")
    common.add_argument("--region", help="override the configured region code")

    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="parse or fetch raw hours into a validated CSV")
    p.add_argument("--in", dest="in_path", metavar="PATH", help="raw CSV to validate")
    p.add_argument("--from", dest="from_date", metavar="DATE", help="fetch range start (ISO date)")
    p.add_argument("--to", dest="to_date", metavar="DATE", help="fetch range end, exclusive (ISO date)")
    p.add_argument("--base-url", dest="base_url", help="override the remote API base URL")
    p.add_argument("--out", required=True, metavar="PATH", help="validated series CSV")
    p.add_argument("--gaps", metavar="PATH", help="also write the gap report CSV")

    p = sub.add_parser("derive", parents=[common], help="derived emissions quantities CSV")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")

    p = sub.add_parser("profile", parents=[common], help="24-row hourly intensity profile CSV")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")

    p = sub.add_parser("synth", parents=[common], help="generate a dispatch scenario series")
    p.add_argument("--out", required=True, metavar="PATH", help="scenario series CSV")
    p.add_argument("--sidecar", metavar="PATH", help="also write the ground-truth sidecar CSV")

    p = sub.add_parser("train", parents=[common], help="train the forecaster on a validated series")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="model file")
    p.add_argument("--history", metavar="PATH", help="also write per-epoch losses CSV")

    p = sub.add_parser("predict", parents=[common], help="24-hour forecast report")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--date", metavar="DATE", help="forecast date (default: day after newest data)")
    p.add_argument("--out", required=True, metavar="PATH", help="report JSON")
    p.add_argument("--csv", metavar="PATH", help="also write the report as CSV")

    p = sub.add_parser("evaluate", parents=[common], help="metrics on a chronological split")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, metavar="PATH", help="metrics JSON")

    p = sub.add_parser("sensitivity", parents=[common], help="demand-forecast sensitivity table")
    p.add_argument("--in", dest="in_path", required=True, metavar="PATH")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--date", metavar="DATE")
    p.add_argument("--out", required=True, metavar="PATH", help="sensitivity JSON")

    p = sub.add_parser("nowcast", parents=[common], help="append fresh hours and re-predict, no retrain")
    p.add_argument("--state", required=True, metavar="DIR", help="directory holding series.csv and model.bin")
    p.add_argument("--append", required=True, metavar="PATH", help="CSV of new hourly observations")
    p.add_argument("--forecast", metavar="PATH", help="file with 24 next-day demand-forecast values")
    p.add_argument("--out", required=True, metavar="PATH", help="forecast report JSON")

    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.region:
        config = config.model_copy(deep=True)
        config.ingest.region = args.region
    return config


def _parse_date(text: str, flag: str) -> str:
    try:
        return date.fromisoformat(text).isoformat()
    except ValueError as exc:
        raise CliError(f"{flag}: not an ISO date: {text!r}", EXIT_USAGE) from exc


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_ingest(args, config: RunConfig, client: ServiceClient) -> None:
    config_payload = config.model_dump(mode="json")
    if args.in_path and (args.from_date or args.to_date):
        raise CliError("ingest: use either --in or --from/--to, not both", EXIT_USAGE)
    if args.in_path:
        body = client.post("/ingest/validate", {"csv": _read_text(args.in_path), "config": config_payload})
    elif args.from_date and args.to_date:
        body = client.post(
            "/ingest/fetch",
            {
                "start": _parse_date(args.from_date, "--from"),
                "end": _parse_date(args.to_date, "--to"),
                "base_url": args.base_url,
                "config": config_payload,
            },
        )
    else:
        raise CliError("ingest: need --in PATH or both --from and --to", EXIT_USAGE)
    atomic_write(Path(args.out), body["csv"])
    if args.gaps:
        lines = ["start,length,method"]
        lines += [f"{e['start']},{e['length']},{e['method']}" for e in body["gap_report"]]
        atomic_write(Path(args.gaps), "\n".join(lines) + "\n")
    write_manifest(Path(args.out), "ingest", config)
    print(f"validated {body['hours']} hours for {body['region']} -> {args.out}")


def _cmd_derive(args, config: RunConfig, client: ServiceClient) -> None:
    body = client.post(
        "/series/derive", {"csv": _read_text(args.in_path), "config": config.model_dump(mode="json")}
    )
    atomic_write(Path(args.out), body["csv"])
    write_manifest(Path(args.out), "derive", config)
    print(f"derived series with {len(body['aef_daily'])} daily factors -> {args.out}")


def _cmd_profile(args, config: RunConfig, client: ServiceClient) -> None:
    body = client.post(
        "/series/profile", {"csv": _read_text(args.in_path), "config": config.model_dump(mode="json")}
    )
    atomic_write(Path(args.out), body["csv"])
    write_manifest(Path(args.out), "profile", config)
    print(f"profile for {body['period_start']}..{body['period_end']} -> {args.out}")


def _cmd_synth(args, config: RunConfig, client: ServiceClient) -> None:
    body = client.post("/synth/generate", {"config": config.model_dump(mode="json")})
    atomic_write(Path(args.out), body["csv"])
    if args.sidecar:
        atomic_write(Path(args.sidecar), body["sidecar_csv"])
    write_manifest(Path(args.out), "synth", config)
    print(f"scenario ({config.synth.days} days) -> {args.out}")


def _cmd_train(args, config: RunConfig, client: ServiceClient) -> None:
    body = client.post(
        "/model/train", {"csv": _read_text(args.in_path), "config": config.model_dump(mode="json")}
    )
    atomic_write(Path(args.out), base64.b64decode(body["model_b64"]))
    if args.history:
        atomic_write(Path(args.history), body["history_csv"])
    write_manifest(Path(args.out), "train", config)
    print(
        f"trained {body['epochs_run']} epochs ({body['stopping_reason']}), "
        f"best val MSE {body['best_val_mse']:.6g} at epoch {body['best_epoch']} -> {args.out}"
    )


def _model_b64(path: str) -> str:
    return base64.b64encode(_read_bytes(path)).decode("ascii")


def _cmd_predict(args, config: RunConfig, client: ServiceClient) -> None:
    payload = {
        "csv": _read_text(args.in_path),
        "model_b64": _model_b64(args.model),
        "config": config.model_dump(mode="json"),
    }
    if args.date:
        payload["target_date"] = _parse_date(args.date, "--date")
    body = client.post("/model/predict", payload)
    atomic_write(Path(args.out), _dump_json(body["report"]))
    if args.csv:
        atomic_write(Path(args.csv), body["report_csv"])
    write_manifest(Path(args.out), "predict", config)
    print(f"forecast for {body['report']['forecast_date']} -> {args.out}")


def _cmd_evaluate(args, config: RunConfig, client: ServiceClient) -> None:
    body = client.post(
        "/model/evaluate",
        {
            "csv": _read_text(args.in_path),
            "model_b64": _model_b64(args.model),
            "split": args.split,
            "config": config.model_dump(mode="json"),
        },
    )
    atomic_write(Path(args.out), _dump_json(body))
    write_manifest(Path(args.out), "evaluate", config)
    rmse = body["metrics"]["rmse_t"]
    print(f"{args.split}: {body['n_windows']} windows, RMSE {rmse:.4f} t -> {args.out}")


def _cmd_sensitivity(args, config: RunConfig, client: ServiceClient) -> None:
    payload = {
        "csv": _read_text(args.in_path),
        "model_b64": _model_b64(args.model),
        "config": config.model_dump(mode="json"),
    }
    if args.date:
        payload["target_date"] = _parse_date(args.date, "--date")
    body = client.post("/model/sensitivity", payload)
    atomic_write(Path(args.out), _dump_json(body))
    write_manifest(Path(args.out), "sensitivity", config)
    print(f"sensitivity for {body['forecast_date']} -> {args.out}")


def _parse_forecast_file(path: str) -> list[float]:
    tokens = _read_text(path).replace(",", " ").split()
    try:
        values = [float(token) for token in tokens]
    except ValueError as exc:
        raise CliError(f"--forecast file {path}: {exc}", EXIT_DATA) from exc
    if len(values) != 24:
        raise CliError(f"--forecast file {path}: expected 24 values, got {len(values)}", EXIT_DATA)
    return values


def _cmd_nowcast(args, config: RunConfig, client: ServiceClient) -> None:
    state_dir = Path(args.state)
    series_path = state_dir / "series.csv"
    model_path = state_dir / "model.bin"
    if not series_path.exists() or not model_path.exists():
        raise CliError(
            f"nowcast state {state_dir} must contain series.csv and model.bin", EXIT_DATA
        )
    payload = {
        "csv": _read_text(str(series_path)),
        "new_csv": _read_text(args.append),
        "model_b64": _model_b64(str(model_path)),
        "config": config.model_dump(mode="json"),
    }
    if args.forecast:
        payload["next_day_forecast"] = _parse_forecast_file(args.forecast)
    body = client.post("/nowcast/append", payload)
    atomic_write(series_path, body["csv"])
    atomic_write(Path(args.out), _dump_json(body["report"]))
    write_manifest(Path(args.out), "nowcast", config)
    flag = "retrain recommended" if body["retrain_recommended"] else "model still fresh"
    print(f"appended; forecast for {body['report']['forecast_date']} ({flag}) -> {args.out}")


_HANDLERS = {
    "ingest": _cmd_ingest,
    "derive": _cmd_derive,
    "profile": _cmd_profile,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "sensitivity": _cmd_sensitivity,
    "nowcast": _cmd_nowcast,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args)
        client = ServiceClient(args.server)
        _HANDLERS[args.command](args, config, client)
        return EXIT_OK
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except MefcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_BY_KIND.get(exc.kind, EXIT_DATA)
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
