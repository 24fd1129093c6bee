"""Command-line entry point: a thin client over the mapping service.

By default commands talk to an in-process service instance (same code path
as a deployed server, no network); pass --server to target a running one.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

FORMATS = ("tum", "scannet_dir", "synthetic")
POSE_MODES = ("gt", "icp")


def _client(server: str):
    if server == "inprocess":
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

        from .service import create_app

        return TestClient(create_app())
    import httpx

    return httpx.Client(base_url=server, timeout=None)


def _post(client, path, payload):
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
    return resp.json()


server_option = click.option("--server", default="inprocess", show_default=True,
                             help="service URL, or 'inprocess' to run locally")


@click.group()
def main():
    """Incremental RGB-D semantic mapping on 3D Gaussian splats."""


@main.command()
@click.argument("dataset_root", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(FORMATS), required=True,
              help="dataset layout")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="key=value file overriding mapper/tracker settings")
@click.option("--pose-mode", type=click.Choice(POSE_MODES), default="gt",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="run output directory")
@click.option("--num-classes", default=20, show_default=True)
@click.option("--no-renders", is_flag=True, help="skip keyframe image export")
@server_option
def run(dataset_root, fmt, config_path, pose_mode, out_dir, num_classes,
        no_renders, server):
    """Process a sequence end to end and write the run artifacts."""
    client = _client(server)
    data = _post(client, "/runs", {
        "dataset_root": str(Path(dataset_root).absolute()),
        "format": fmt,
        "out_dir": str(Path(out_dir).absolute()),
        "pose_mode": pose_mode,
        "config_path": str(Path(config_path).absolute()) if config_path else None,
        "num_classes": num_classes,
        "export_renders": not no_renders,
    })
    man = data["manifest"]
    click.echo(f"frames processed: {man['frames_processed']}")
    click.echo(f"keyframes: {len(man['keyframes'])}")
    click.echo(f"final map size: {man['final_map_size']}")
    kf_psnr = man["metric_summary"].get("keyframe_psnr_mean")
    if kf_psnr is not None:
        click.echo(f"keyframe psnr [dB]: {kf_psnr:.2f}")
    click.echo(f"artifacts in {out_dir}")


@main.command()
@click.argument("snapshot", type=click.Path())
@click.argument("pose_file", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--intrinsics", help="fx,fy,cx,cy,width,height (default: "
              "intrinsics.txt next to the pose file, else 640x480/525)")
@server_option
def render(snapshot, pose_file, out_dir, intrinsics, server):
    """Render color/depth/semantic/silhouette images from a saved map."""
    payload = {
        "snapshot_path": str(Path(snapshot).absolute()),
        "pose_file": str(Path(pose_file).absolute()),
        "out_dir": str(Path(out_dir).absolute()),
    }
    if intrinsics:
        try:
            fx, fy, cx, cy, w, h = (float(v) for v in intrinsics.split(","))
        except ValueError:
            raise click.UsageError("--intrinsics expects fx,fy,cx,cy,width,height")
        payload["intrinsics"] = {"fx": fx, "fy": fy, "cx": cx, "cy": cy,
                                 "width": int(w), "height": int(h)}
    client = _client(server)
    data = _post(client, "/render", payload)
    click.echo(f"wrote {len(data['files'])} images to {out_dir}")


@main.command(name="eval")
@click.argument("run_dir", type=click.Path(exists=True))
@click.argument("dataset_root", type=click.Path(exists=True))
@click.option("--every-frame", is_flag=True,
              help="evaluate every frame instead of holdout/keyframes")
@server_option
def eval_cmd(run_dir, dataset_root, every_frame, server):
    """Evaluate a finished run against dataset ground truth."""
    client = _client(server)
    data = _post(client, "/eval", {
        "run_dir": str(Path(run_dir).absolute()),
        "dataset_root": str(Path(dataset_root).absolute()),
        "every_frame": every_frame,
    })
    click.echo(data["csv"], nl=False)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True)
def serve(host, port):
    """Run the mapping service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
