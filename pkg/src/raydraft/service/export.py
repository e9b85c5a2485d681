"""Dump the service's OpenAPI description to a file.

Usage: python -m raydraft.service.export [output-path]
"""

import json
import sys
from pathlib import Path

from .app import ServiceSettings, create_app


def main(out_path: str = "docs/openapi.json") -> None:
    app = create_app(ServiceSettings(models_dir="unused"), load_models=False)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(app.openapi(), indent=1), encoding="utf-8")
    print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
