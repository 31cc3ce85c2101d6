from typing import Union, Optional
import hashlib
import json
import pathlib
import sys

from ruamel.yaml.parser import ParserError
from ruamel.yaml.scanner import ScannerError
from ruamel.yaml import YAML

from .constants import REPORT_TEXT_PRECISION
from .version import __version__

fast_yaml = YAML(typ="safe")

REPORT_SCHEMA_VERSION = "1.0"


class CryoSamuError(Exception):
    category = "error"
    exit_code = 1


class MapFormatError(CryoSamuError):
    category = "map-format"
    exit_code = 2


class StructureParseError(CryoSamuError):
    category = "structure-parse"
    exit_code = 2


class EmbeddingFormatError(CryoSamuError):
    category = "embedding-format"
    exit_code = 2


class WeightsError(CryoSamuError):
    category = "weights"
    exit_code = 2


class ConfigError(CryoSamuError):
    category = "config"
    exit_code = 3


class SimulationError(CryoSamuError):
    category = "simulation"
    exit_code = 4


class PoolingError(CryoSamuError):
    category = "pooling"
    exit_code = 4


class VolumeError(CryoSamuError):
    category = "volume"
    exit_code = 4


class TilingError(CryoSamuError):
    category = "tiling"
    exit_code = 4


class NetworkError(CryoSamuError):
    category = "network"
    exit_code = 4


class TrainingError(CryoSamuError):
    category = "training"
    exit_code = 4


class MetricsError(CryoSamuError):
    category = "metrics"
    exit_code = 4


def load_yaml(path: Union[str, pathlib.Path]) -> dict:
    """Load a YAML (or JSON) mapping from a local file."""
    path = pathlib.Path(path)
    try:
        contents = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")

    try:
        node = fast_yaml.load(contents)
    except (ParserError, ScannerError) as e:
        raise ConfigError(f"\n===\nMalformed file: {path}\n===\n{e}")

    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"In file {path}: expecting a mapping at the top level")
    return node


def load_json(path: Union[str, pathlib.Path], what: str = "file") -> dict:
    path = pathlib.Path(path)
    try:
        with path.open() as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed {what} {path}: {e}")


def sha256sum(path: Union[str, pathlib.Path], chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with pathlib.Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(chunk), b""):
            digest.update(block)
    return digest.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def make_report(kind: str, body: dict) -> dict:
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "producer": f"cryosamu {__version__}",
        "report": kind,
    }
    report.update(body)
    return report


def dump_report(report: dict, out: Optional[Union[str, pathlib.Path]] = None):
    text = json.dumps(report, indent=4, sort_keys=True)
    if out is None:
        sys.stdout.write(text + "\n")
    else:
        pathlib.Path(out).write_text(text + "\n")


def format_table(rows: list, header: list) -> str:
    """Render rows as aligned text columns."""
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join(
        "  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells
    ) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{REPORT_TEXT_PRECISION}f}"
    return str(v)
