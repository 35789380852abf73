"""Command line entry point: ``gazeshield <command> [--config FILE] [--seed N] [--out DIR] [--data CSV]``."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import experiments
from .config import ConfigError, load_schema, resolve_config
from .data import DataError
from .vault import AuthorizationError, NotFoundError, StaleEpochError, Vault, VaultError

PASSPHRASE_ENV = "GAZESHIELD_ADMIN_PASSPHRASE"

EXIT_CONFIG, EXIT_DATA, EXIT_AUTH, EXIT_NOT_FOUND = 2, 3, 4, 5

log = logging.getLogger("gazeshield")

# report kind -> schema file
REPORT_SCHEMAS = {
    "gazeshield.synth_provenance": "provenance",
    "gazeshield.classification_report": "classification",
    "gazeshield.gap_report": "gap",
    "gazeshield.assignment_report": "assignment",
    "gazeshield.phase2_report": "phase2",
    "gazeshield.privacy_audit": "privacy_audit",
}


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def write_atomic(path: Path, blob: bytes, mode: int | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(blob)
    if mode is not None:
        os.chmod(tmp, mode)
    os.replace(tmp, path)


def _write_all(out_dir: Path, files: dict[str, bytes]) -> None:
    for rel, blob in sorted(files.items()):
        write_atomic(out_dir / rel, blob)
    click.echo(f"wrote {len(files)} file(s) to {out_dir}")


def common_options(fn):
    fn = click.option("--data", "data", type=click.Path(dir_okay=False), default=None,
                      help="CSV dataset (default: synthetic data from the config).")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                      help="Output directory.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Top-level seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="JSON config file.")(fn)
    return fn


def _config(config_path, seed, out, data) -> dict:
    try:
        return resolve_config(config_path, {"seed": seed, "out": out, "data.csv": data})
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _passphrase(confirm: bool = False) -> str:
    value = os.environ.get(PASSPHRASE_ENV)
    if value:
        return value
    return click.prompt("admin passphrase", hide_input=True, confirmation_prompt=confirm, err=True)


def _run(fn):
    """Map domain errors to exit codes."""
    try:
        return fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    except AuthorizationError:
        _fail(EXIT_AUTH, "authorization failed")
    except StaleEpochError as exc:
        _fail(EXIT_NOT_FOUND, str(exc))
    except NotFoundError as exc:
        _fail(EXIT_NOT_FOUND, str(exc))
    except VaultError as exc:
        _fail(EXIT_DATA, str(exc))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Re-identification experiments on gaze data and a pseudonymised federated pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
def synth(config_path, seed, out, data):
    """Generate a synthetic dataset CSV plus its provenance JSON."""
    cfg = _config(config_path, seed, out, data)

    def go():
        _write_all(Path(cfg["out"]) / "synth", experiments.run_synth(cfg))

    _run(go)


def _scenario(name: str, runner):
    @common_options
    def command(config_path, seed, out, data):
        cfg = _config(config_path, seed, out, data)

        def go():
            ds, summary = experiments.load_data(cfg)
            out_dir = Path(cfg["out"])
            _write_all(out_dir / name, runner(cfg, ds, summary))
            if name in ("scenario2", "scenario3"):
                _maybe_gap(out_dir, cfg["gap"]["model"])

        _run(go)

    command.__name__ = name
    command.__doc__ = runner.__doc__
    return main.command(name=name)(command)


def _maybe_gap(out_dir: Path, model: str) -> None:
    p2, p3 = out_dir / "scenario2" / "report.json", out_dir / "scenario3" / "report.json"
    if not (p2.exists() and p3.exists()):
        return
    gap = experiments.gap_report(json.loads(p2.read_text()), json.loads(p3.read_text()), model)
    if gap is None:
        log.warning("scenario 2 and 3 reports differ in data or models; no gap report")
        return
    write_atomic(out_dir / "gap_report.json", experiments.dump_json(gap))
    click.echo(f"accuracy gap ({model}): {gap['gap']:+.4f}")


_scenario("scenario1", experiments.run_scenario1)
_scenario("scenario2", experiments.run_scenario2)
_scenario("scenario3", experiments.run_scenario3)
_scenario("scenario4", experiments.run_scenario4)


def _vault_path(cfg: dict) -> Path:
    return Path(cfg["phase2"]["vault"] or Path(cfg["out"]) / "phase2" / "vault.json")


@main.command()
@common_options
@click.option("--rotate-epoch", is_flag=True, default=None, help="Start a new dummy-id epoch first.")
def phase2(config_path, seed, out, data, rotate_epoch):
    """Dummy-id federated training with a privacy audit of every emitted file."""
    cfg = _config(config_path, seed, out, data)
    if rotate_epoch:
        cfg["phase2"]["rotate_epoch"] = True

    def go():
        ds, summary = experiments.load_data(cfg)
        vpath = _vault_path(cfg)
        passphrase = _passphrase(confirm=not vpath.exists())
        vault, keys, created = experiments.open_vault(vpath, passphrase, cfg["phase2"]["kdf_iterations"])
        files = experiments.run_phase2(cfg, ds, summary, vault, keys)
        vpath.parent.mkdir(parents=True, exist_ok=True)
        vault.save(vpath)
        _write_all(Path(cfg["out"]) / "phase2", files)
        audit = json.loads(files["privacy_audit.json"])
        rep = json.loads(files["report.json"])
        click.echo(f"final global test accuracy {rep['final_test_accuracy']:.4f}; "
                   f"privacy audit {'passed' if audit['passed'] else 'FAILED'}")
        if not audit["passed"]:
            sys.exit(EXIT_DATA)

    _run(go)


@main.command()
@click.argument("dummy")
@click.option("--epoch", type=click.IntRange(0), default=None, help="Epoch the dummy was issued in.")
@click.option("--vault", "vault_path", type=click.Path(dir_okay=False), default=None,
              help="Vault file (default: the phase2 vault of the config).")
@common_options
def resolve(dummy, epoch, vault_path, config_path, seed, out, data):
    """Map a dummy id back to the true id (admin passphrase required)."""
    cfg = _config(config_path, seed, out, data)
    path = Path(vault_path) if vault_path else _vault_path(cfg)

    def go():
        vault = Vault.load(path)
        passphrase = _passphrase()
        try:
            try:
                keys = vault.unlock(passphrase)
            except AuthorizationError:
                vault.resolve_dummy(dummy, epoch, None, passphrase)  # records the denied attempt
                raise
            click.echo(vault.resolve_dummy(dummy, epoch, keys, passphrase))
        finally:
            vault.save(path)

    _run(go)


@main.command()
@common_options
def report(config_path, seed, out, data):
    """Validate every JSON report under the output directory and print a summary."""
    cfg = _config(config_path, seed, out, data)
    import jsonschema

    out_dir = Path(cfg["out"])
    bad = 0
    for path in sorted(out_dir.rglob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        kind = doc.get("kind") or doc.get("format")
        schema = REPORT_SCHEMAS.get(kind) or ("vault" if kind == "gazeshield.vault" else None)
        if schema is None:
            click.echo(f"skip     {path.relative_to(out_dir)}")
            continue
        try:
            jsonschema.validate(doc, load_schema(schema))
        except jsonschema.ValidationError as exc:
            bad += 1
            click.echo(f"INVALID  {path.relative_to(out_dir)}: {exc.message}")
            continue
        click.echo(f"ok       {path.relative_to(out_dir)}  {_headline(doc)}")
    if bad:
        sys.exit(EXIT_CONFIG)


def _headline(doc: dict) -> str:
    kind = doc.get("kind")
    if kind == "gazeshield.classification_report":
        return ", ".join(f"{m} acc={v['test']['accuracy']:.4f}" for m, v in doc["models"].items())
    if kind == "gazeshield.gap_report":
        return f"gap={doc['gap']:+.4f}"
    if kind == "gazeshield.assignment_report":
        return f"k={doc['selected_k']} ensemble new={doc['summary']['ensemble']['new_fraction']:.3f}"
    if kind == "gazeshield.phase2_report":
        return f"final acc={doc['final_test_accuracy']:.4f}"
    if kind == "gazeshield.privacy_audit":
        return "passed" if doc["passed"] else "FAILED"
    return ""


if __name__ == "__main__":
    main()
