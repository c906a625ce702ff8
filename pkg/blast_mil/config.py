"""Frozen dataclass configuration with canonical JSON and digests"""

from __future__ import annotations

import typing
from typing import Any, Dict, Optional, Type, TypeVar, Union

import os
import json
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import canonical_json, sha256_hex
from .errors import Fatal


C = TypeVar('C', bound='JsonConfig')


class JsonConfig:
    """Mixin for frozen dataclasses: JSON round-trip plus a content digest"""

    def to_json(self) -> Dict[str, Any]:
        loaded: Dict[str, Any] = json.loads(
            canonical_json(dataclasses.asdict(self))  # type: ignore
        )
        return loaded

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_json()))

    def replace(self: C, **changes: Any) -> C:
        return dataclasses.replace(self, **changes)  # type: ignore

    @classmethod
    def from_json(cls: Type[C], data: Dict[str, Any]) -> C:
        if not isinstance(data, dict):
            raise Fatal(f'{cls.__name__}: expected a JSON object')

        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}  # type: ignore
        unknown = sorted(set(data) - names)
        if unknown:
            raise Fatal(f'{cls.__name__}: unknown option(s) {", ".join(unknown)}')

        values = {k: _coerce(hints.get(k), v) for k, v in data.items()}
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise Fatal(f'{cls.__name__}: {exc}') from None

    @classmethod
    def load(cls: Type[C], path: Union[str, Path]) -> C:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise Fatal(f'unable to read {cls.__name__} from {path}: {exc}') from None
        return cls.from_json(data)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write('\n')


def _coerce(hint: Any, value: Any) -> Any:
    if value is None:
        return None

    for candidate in _unwrap_optional(hint):
        if isinstance(candidate, type):
            if issubclass(candidate, JsonConfig) and isinstance(value, dict):
                return candidate.from_json(value)
            if issubclass(candidate, Enum):
                return candidate(value)

    if isinstance(value, list):
        return tuple(_coerce(None, v) for v in value)
    return value


def _unwrap_optional(hint: Any) -> typing.List[Any]:
    if typing.get_origin(hint) is Union:
        return [a for a in typing.get_args(hint) if a is not type(None)]
    return [hint]


@dataclass(frozen=True)
class RunConfig(JsonConfig):
    """Everything a CLI invocation was asked to do; digested into every artifact"""

    command: str
    seed: int = 0
    out_dir: str = ''
    backbone: str = 'toy_cnn'
    sequence_length: int = 15
    budget: str = 'desk'
    options: Dict[str, Any] = field(default_factory=dict)

    def digest(self) -> str:
        """Digest of what was asked for; where the output went does not count"""
        content = self.to_json()
        content.pop('out_dir')
        return sha256_hex(canonical_json(content))


WEIGHTS_DIR_ENV = 'BLAST_MIL_WEIGHTS_DIR'


def use_weights_cache() -> Optional[str]:
    """Point torch.hub at $BLAST_MIL_WEIGHTS_DIR when it is set"""
    directory = os.environ.get(WEIGHTS_DIR_ENV)
    if directory:
        import torch.hub  # pylint: disable=import-outside-toplevel

        torch.hub.set_dir(directory)
    return directory
