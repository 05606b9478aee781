#!/usr/bin/env python3
"""Seed a throwaway service instance and dump real responses used as
frontend test fixtures (frontend/fixtures/)."""

import json
import pathlib
import sys
import tempfile

from fastapi.testclient import TestClient

from fundustrack.config import AppConfig
from fundustrack.imaging import encode_png
from fundustrack.pipeline import PipelineConfig
from fundustrack.service import create_app
from fundustrack.trends import TrendStore

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "tests"))
from conftest import synthetic_fundus  # noqa: E402

UPLOAD_TIMES = [
    "2026-06-03T08:30:00+00:00",
    "2026-06-03T19:10:00+00:00",
    "2026-06-12T09:00:00+00:00",
    "2026-06-17T07:45:00+00:00",
    "2026-06-28T18:20:00+00:00",
]


def main() -> None:
    out_dir = pathlib.Path(__file__).resolve().parent.parent / "frontend" / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        config = AppConfig(
            store_dir=tmp, pipeline=PipelineConfig(scales=(1.0, 2.0, 3.0), min_arc_px=4.0)
        )
        client = TestClient(create_app(config, store=TrendStore(tmp)))
        uid = client.post("/users", json={"display_name": "Fixture"}).json()["user_id"]
        token = client.post("/auth/token", json={"user_id": uid}).json()["token"]
        headers = {"Authorization": f"Bearer {token}"}

        png = encode_png(synthetic_fundus(128))
        for when in UPLOAD_TIMES:
            response = client.post(
                "/scans",
                files={"image": ("scan.png", png, "image/png")},
                data={"captured_at": when},
                headers=headers,
            )
            response.raise_for_status()

        calendar = client.get(
            f"/users/{uid}/calendar", params={"year": 2026, "month": 6}, headers=headers
        ).json()
        (out_dir / "calendar-2026-06.json").write_text(
            json.dumps(calendar, indent=2, sort_keys=True) + "\n"
        )

        scan = client.get(f"/users/{uid}/history", headers=headers).json()["scans"][0]
        sample = {
            "scan": scan,
            "severities": client.get(f"/scans/{scan['scan_id']}", headers=headers).json()[
                "severities"
            ],
            "alerts": [],
            "replay": False,
        }
        (out_dir / "scan-response.json").write_text(
            json.dumps(sample, indent=2, sort_keys=True) + "\n"
        )
    print(f"wrote fixtures to {out_dir}")


if __name__ == "__main__":
    main()
