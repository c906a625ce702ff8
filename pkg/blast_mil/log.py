"""Line-delimited JSON logging for the blast_mil logger tree"""

from __future__ import annotations

from typing import Any, Dict, Optional, TextIO

import sys
import json
import logging


ROOT_LOGGER = 'blast_mil'

# Attributes every LogRecord carries; anything else arrived through `extra=`
_RESERVED = frozenset(
    vars(logging.LogRecord('', logging.INFO, '', 0, '', (), None)).keys()
) | {'message', 'asctime'}


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry: Dict[str, Any] = {
            'level': record.levelname.lower(),
            'logger': record.name,
            'event': record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith('_'):
                entry[key] = value
        if record.exc_info:
            entry['exception'] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True, default=str)


def configure_logging(
    level: str = 'info', stream: Optional[TextIO] = None
) -> logging.Logger:
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        if getattr(handler, '_blast_mil', False):
            logger.removeHandler(handler)

    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    setattr(handler, '_blast_mil', True)

    logger.addHandler(handler)
    logger.setLevel(level.upper())
    logger.propagate = False
    return logger
