from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch

from recap.models.schemas import InvalidArgumentError
from recap.services.splat import Camera


@dataclass(frozen=True)
class TrainingView:
    camera: Camera
    target: torch.Tensor


@dataclass(frozen=True)
class TrainingSet:
    """k environment slots, each a list of views captured under that slot's unknown lighting"""
    environments: Tuple[Tuple[TrainingView, ...], ...]
    names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.environments:
            raise InvalidArgumentError("TrainingSet needs at least one environment")
        shapes = set()
        for i, views in enumerate(self.environments):
            if not views:
                raise InvalidArgumentError(f"Environment {i} has no views")
            for view in views:
                if view.target.dim() != 3 or view.target.shape[2] != 3:
                    raise InvalidArgumentError(f"Targets must be (H, W, 3), got {tuple(view.target.shape)}")
                if (view.camera.height, view.camera.width) != tuple(view.target.shape[:2]):
                    raise InvalidArgumentError("Target size does not match its camera")
                shapes.add(tuple(view.target.shape))
        if len(shapes) != 1:
            raise InvalidArgumentError(f"All targets must share one resolution, got {sorted(shapes)}")

    @classmethod
    def from_lists(cls, views: Sequence[Sequence[Tuple[Camera, torch.Tensor]]], names: Sequence[str] = ()) -> "TrainingSet":
        return cls(
            environments=tuple(tuple(TrainingView(cam, img) for cam, img in env) for env in views),
            names=tuple(names),
        )

    @property
    def k(self) -> int:
        return len(self.environments)

    def view_counts(self) -> List[int]:
        return [len(v) for v in self.environments]

    def subset(self, indices: Sequence[int]) -> "TrainingSet":
        names = tuple(self.names[i] for i in indices) if self.names else ()
        return TrainingSet(tuple(self.environments[i] for i in indices), names)
