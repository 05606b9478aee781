#!/usr/bin/env python3
"""Regenerate docs/openapi.json from the live FastAPI app."""

import json
from pathlib import Path

from fundustrack.config import AppConfig
from fundustrack.service import create_app
from fundustrack.trends import TrendStore

import tempfile

with tempfile.TemporaryDirectory() as tmp:
    app = create_app(AppConfig(store_dir=tmp), store=TrendStore(tmp))
    schema = app.openapi()

out = Path(__file__).resolve().parent.parent / "docs" / "openapi.json"
out.write_text(json.dumps(schema, sort_keys=True, indent=2) + "\n", encoding="utf-8")
print(f"wrote {out}")
