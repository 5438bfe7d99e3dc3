"""Command-line surface: serve, chat, db inspection, export, simulation."""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click
import httpx

from .config import load_config
from .errors import ServiceError
from .sim import SimScript, load_report_file, render_table, run_rounds, write_report_file
from .store import EventStore
from .update import UpdateManager


def _load(config_path: str | None):
    try:
        return load_config(config_path)
    except (ServiceError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main():
    """Clarify-then-answer assistant service with episodic retrieval."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config file (defaults apply when omitted).")
def serve(config_path):
    """Run the HTTP service."""
    import uvicorn

    from .app import create_app
    from .runtime import build_runtime

    config = _load(config_path)
    runtime = build_runtime(config)
    app = create_app(runtime)
    uvicorn.run(app, host=config.listen.host, port=config.listen.port, log_level="info")


@main.command()
@click.option("--server", default="http://127.0.0.1:8080", show_default=True)
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
def chat(server, image_path):
    """Interactive terminal dialogue against a running service."""
    image_b64 = base64.b64encode(Path(image_path).read_bytes()).decode()
    client = httpx.Client(base_url=server, timeout=60.0)

    def fail(resp):
        try:
            err = resp.json()["error"]
            raise click.ClickException(f"{err['code']}: {err['message']}")
        except (KeyError, ValueError):
            raise click.ClickException(f"HTTP {resp.status_code}: {resp.text}")

    utterance = click.prompt("you")
    resp = client.post("/sessions", json={"image_b64": image_b64, "utterance": utterance})
    if resp.status_code != 200:
        fail(resp)
    data = resp.json()
    session_id = data["session_id"]
    while True:
        action = data["action"]
        if action["type"] == "ask_clarification":
            click.echo(f"robot> {action['question']}")
            reply = click.prompt("you")
        elif action["type"] == "final_answer":
            ref = "with reference" if action["used_reference"] else "no reference"
            click.echo(f"robot> {action['text']}  [{ref}]")
            reply = click.prompt("feedback (confirm / correct / anything)")
        else:  # session_closed
            if action.get("event_id"):
                click.echo(f"stored event {action['event_id']}")
            click.echo("session closed")
            return
        resp = client.post(f"/sessions/{session_id}/messages", json={"text": reply})
        if resp.status_code != 200:
            fail(resp)
        data = resp.json()


@main.group()
def db():
    """Inspect the event database."""


@db.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def stats(config_path):
    """Print count, dim, provider tag, and last export position."""
    config = _load(config_path)
    store = EventStore(config.storage.data_dir, fsync=False)
    try:
        manager = UpdateManager(store, threshold=config.update.threshold)
        s = store.stats()
        click.echo(f"events:            {s.count}")
        click.echo(f"dim:               {s.dim if s.dim is not None else '-'}")
        click.echo(f"provider_tag:      {s.provider_tag or '-'}")
        click.echo(f"last_export_id:    {manager.state.last_exported_event_id or '-'}")
        click.echo(f"pending_to_export: {manager.pending_event_count()}")
        click.echo(f"model_version:     {manager.state.active_model_version}")
    finally:
        store.close()


@db.command()
@click.argument("event_id")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def show(config_path, event_id):
    """Print one stored event as JSON."""
    from .app import event_json

    config = _load(config_path)
    store = EventStore(config.storage.data_dir, fsync=False)
    try:
        event = store.get_event(event_id)
        click.echo(json.dumps(event_json(event, include_embeddings=True), indent=2))
    except ServiceError as exc:
        raise click.ClickException(str(exc)) from exc
    finally:
        store.close()


@main.command("export-training")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def export_training(config_path):
    """Export pending events as a training batch directory."""
    config = _load(config_path)
    store = EventStore(config.storage.data_dir, fsync=False)
    try:
        manager = UpdateManager(store, threshold=config.update.threshold)
        batch = manager.export_training_batch()
        click.echo(f"exported {batch.manifest['record_count']} records to {batch.directory}")
    except ServiceError as exc:
        raise click.ClickException(str(exc)) from exc
    finally:
        store.close()


@main.group()
def sim():
    """Run scripted multi-round experiments."""


@sim.command()
@click.argument("script_path", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Report file (JSON lines). Defaults next to the script.")
@click.option("--workdir", type=click.Path(), default=None,
              help="Keep the run's store here instead of a temp dir.")
def run(script_path, out_path, workdir):
    """Run a simulation script and print the per-round accuracy table."""
    try:
        script = SimScript.load(script_path)
        reports = run_rounds(script, workdir=workdir)
    except ServiceError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(render_table(reports))
    out = Path(out_path) if out_path else Path(script_path).with_suffix(".report.jsonl")
    write_report_file(reports, out)
    click.echo(f"report written to {out}")


@sim.command("show")
@click.argument("report_path", type=click.Path(exists=True))
def sim_show(report_path):
    """Re-render the table from a stored report file."""
    reports = load_report_file(report_path)
    click.echo(render_table(reports))


if __name__ == "__main__":
    sys.exit(main())
