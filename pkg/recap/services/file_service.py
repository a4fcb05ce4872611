import logging
from pathlib import Path
from typing import Any, List, Optional, Sequence, Union

import orjson
import pandas as pd
import torch

from recap.models.schemas import LossRecord, PostProcessConfig, RunManifest, rows_to_records
from recap.services.envmap import CubeMap, PrefilteredEnv
from recap.services.hdr_io import write_float_dump, write_png
from recap.services.shading import postprocess

logger = logging.getLogger(__name__)

LOSS_TERMS = ("image", "sat", "ec", "dn", "total")

# (row, column) of each face in a 3 x 4 horizontal cross, faces ordered +x, -x, +y, -y, +z, -z
CROSS_LAYOUT = ((1, 2), (1, 0), (0, 1), (2, 1), (1, 1), (1, 3))


class FileService:
    """Writes every artifact of one run beneath a single output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        target = self.out_dir.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def save_loss_history(self, records: Sequence[LossRecord], filename: str = "loss_history.csv") -> Path:
        """Long format: one (iteration, term, value) row per loss term"""
        try:
            rows = [
                {"iteration": r.iteration, "term": term, "value": getattr(r, term)}
                for r in records
                for term in LOSS_TERMS
            ]
            df = pd.DataFrame(rows, columns=["iteration", "term", "value"])
            filepath = self.path(filename)
            df.to_csv(filepath, index=False, encoding="utf-8")
            logger.info(f"Saved {len(records)} iterations of loss history to {filepath}")
            return filepath
        except Exception as e:
            logger.error(f"Failed to save loss history: {str(e)}")
            raise

    def save_table(self, rows: Sequence[Any], filename: str, columns: Optional[List[str]] = None) -> Path:
        """Pydantic rows or plain dicts to a CSV with a header row"""
        try:
            if not rows:
                raise ValueError(f"No rows to save to {filename}")
            records = rows_to_records(rows) if hasattr(rows[0], "model_dump") else list(rows)
            records = [
                {k: (orjson.dumps(v, option=orjson.OPT_SORT_KEYS).decode() if isinstance(v, dict) else v) for k, v in rec.items()}
                for rec in records
            ]
            df = pd.DataFrame(records)
            if columns:
                df = df.reindex(columns=columns)
            filepath = self.path(filename)
            df.to_csv(filepath, index=False, encoding="utf-8")
            logger.info(f"Saved {len(df)} rows to {filepath}")
            return filepath
        except Exception as e:
            logger.error(f"Failed to save table {filename}: {str(e)}")
            raise

    def save_metrics(self, rows: Sequence[Any], filename: str = "metrics.csv") -> Path:
        return self.save_table(rows, filename)

    def write_manifest(self, manifest: RunManifest, filename: str = "manifest.json") -> Path:
        filepath = self.path(filename)
        filepath.write_bytes(orjson.dumps(manifest.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
        logger.info(f"Wrote manifest to {filepath}")
        return filepath

    def save_cube(self, cube: CubeMap, stem: str, preview: bool = True) -> Path:
        """Float dump of the texels plus a clipped, gamma-encoded cross preview"""
        dump = write_float_dump(cube.texels, self.path(f"{stem}.bin"))
        if preview:
            write_png(cube_cross(cube, PostProcessConfig()), self.path(f"{stem}.png"))
        return dump

    def save_prefiltered(self, env: PrefilteredEnv, stem: str) -> List[Path]:
        written = [self.save_cube(env.diffuse, f"{stem}_diffuse")]
        for level, (roughness, cube) in enumerate(env.specular):
            written.append(self.save_cube(cube, f"{stem}_specular_{level}_r{roughness:.2f}"))
        return written

    def save_image(self, image: torch.Tensor, stem: str, linear: Optional[torch.Tensor] = None) -> Path:
        png = write_png(image, self.path(f"{stem}.png"))
        if linear is not None:
            write_float_dump(linear, self.path(f"{stem}.bin"))
        return png


def cube_cross(cube: CubeMap, cfg: PostProcessConfig) -> torch.Tensor:
    """Display-encoded (3N, 4N, 3) horizontal cross; unused cells are black"""
    n = cube.face_size
    canvas = torch.zeros(3 * n, 4 * n, 3, dtype=cube.texels.dtype)
    display = postprocess(torch.clamp_min(cube.texels.detach(), 0.0), cfg)
    for face, (row, col) in enumerate(CROSS_LAYOUT):
        canvas[row * n:(row + 1) * n, col * n:(col + 1) * n] = display[face]
    return canvas
