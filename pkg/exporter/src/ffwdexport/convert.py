"""The export operation: community checkpoint in, engine checkpoint out.

Every tensor named by the map is located in the source file, decoded to
float32, shape-checked against what the engine's config demands (accounting
for the per-entry transpose policy), transposed where flagged, and written
to the engine container in canonical order.

Failures do not short-circuit: all missing tensors, undecodable dtypes, and
shape mismatches are gathered into one error, and nothing is written unless
every tensor passes.
"""

import numpy as np

from .errors import ValidationError
from .ffwd_format import write_engine_checkpoint
from .namemap import TensorNameMap, load_name_map
from .safetensors_io import SafetensorsFile


def collect_engine_tensors(src: SafetensorsFile,
                           name_map: TensorNameMap) -> dict[str, np.ndarray]:
    """Decode, check, and orient every mapped tensor; aggregate all failures."""
    tensors: dict[str, np.ndarray] = {}
    problems: list[str] = []
    available = set(src.names)
    for engine_name, entry in name_map.entries.items():
        if entry.source not in available:
            problems.append(
                f"{engine_name}: source tensor {entry.source!r} not in {src.path}"
            )
            continue
        try:
            arr = src.tensor(entry.source)
        except ValidationError as exc:
            problems.append(f"{engine_name}: {exc}")
            continue
        expected = name_map.expected_source_shape(engine_name)
        if arr.shape != expected:
            problems.append(
                f"{engine_name}: source tensor {entry.source!r} has shape "
                f"{arr.shape}, config requires {expected}"
                f"{' before transposition' if entry.transpose else ''}"
            )
            continue
        tensors[engine_name] = np.ascontiguousarray(arr.T if entry.transpose else arr)
    if problems:
        raise ValidationError(
            f"export aborted, {len(problems)} problem(s); nothing written:\n  - "
            + "\n  - ".join(problems)
        )
    return tensors


def export_checkpoint(src_path, map_path, out_path) -> dict:
    """Run a full export; returns a summary of what was written."""
    name_map = load_name_map(map_path)
    src = SafetensorsFile(src_path)
    tensors = collect_engine_tensors(src, name_map)
    write_engine_checkpoint(out_path, name_map.config, tensors)
    return {
        "out": str(out_path),
        "n_tensors": len(tensors),
        "n_parameters": int(sum(a.size for a in tensors.values())),
        "tied_output": name_map.tied_output,
    }
