"""Single-file checkpoints for the aggregator and the detector

A checkpoint is one `torch.save` archive holding the parameter tensors, a
training-stage tag, the digest of the run configuration and the digest of the
frozen feature extractor the parameters were trained against. A parameter
digest is stored alongside so corruption is caught on load.
"""

from __future__ import annotations

from typing import Any, Dict, Mapping, NamedTuple, Optional, Union

import hashlib
import logging
from collections import OrderedDict
from pathlib import Path

import torch

from .errors import CheckpointError


CHECKPOINT_VERSION = 1

KIND_AGGREGATOR = 'aggregator'
KIND_DETECTOR = 'detector'

logger = logging.getLogger(__name__)


class Checkpoint(NamedTuple):
    kind: str
    stage: int
    state_dict: Dict[str, torch.Tensor]
    config_digest: str
    extractor_digest: Optional[str]
    metadata: Dict[str, Any]

    def parameter_digest(self) -> str:
        return state_digest(self.state_dict)

    def with_stage(self, stage: int) -> Checkpoint:
        return self._replace(stage=stage)


def state_digest(state_dict: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for key in sorted(state_dict):
        tensor = state_dict[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(str(tensor.dtype).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    state = OrderedDict(
        (k, v.detach().cpu().clone()) for k, v in checkpoint.state_dict.items()
    )
    archive = {
        'version': CHECKPOINT_VERSION,
        'kind': checkpoint.kind,
        'stage': checkpoint.stage,
        'state_dict': state,
        'config_digest': checkpoint.config_digest,
        'extractor_digest': checkpoint.extractor_digest,
        'parameter_digest': state_digest(state),
        'metadata': checkpoint.metadata,
    }
    try:
        torch.save(archive, str(path))
    except OSError as exc:
        raise CheckpointError(f'unable to write checkpoint {path}: {exc}') from None

    logger.info(
        'saved checkpoint',
        extra={'path': str(path), 'kind': checkpoint.kind, 'stage': checkpoint.stage},
    )


def load_checkpoint(
    path: Union[str, Path],
    expected_kind: Optional[str] = None,
    extractor_digest: Optional[str] = None,
) -> Checkpoint:
    try:
        archive = torch.load(str(path), map_location='cpu', weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f'checkpoint not found: {path}') from None
    except Exception as exc:  # pylint: disable=broad-except
        raise CheckpointError(f'unable to read checkpoint {path}: {exc}') from None

    if not isinstance(archive, dict) or archive.get('version') != CHECKPOINT_VERSION:
        version = archive.get('version') if isinstance(archive, dict) else None
        raise CheckpointError(
            f'checkpoint {path} has version {version!r}, expected {CHECKPOINT_VERSION}'
        )

    checkpoint = Checkpoint(
        kind=archive['kind'],
        stage=int(archive['stage']),
        state_dict=dict(archive['state_dict']),
        config_digest=archive['config_digest'],
        extractor_digest=archive['extractor_digest'],
        metadata=dict(archive['metadata']),
    )

    if checkpoint.parameter_digest() != archive['parameter_digest']:
        raise CheckpointError(f'parameter digest mismatch in {path}')

    if expected_kind is not None and checkpoint.kind != expected_kind:
        raise CheckpointError(
            f'{path} holds a {checkpoint.kind} checkpoint, expected {expected_kind}'
        )

    if (
        extractor_digest is not None
        and checkpoint.extractor_digest is not None
        and checkpoint.extractor_digest != extractor_digest
    ):
        raise CheckpointError(
            f'frozen extractor digest mismatch in {path}',
            extended=(
                f'checkpoint: {checkpoint.extractor_digest}\n'
                f'extractor:  {extractor_digest}'
            ),
        )

    return checkpoint
