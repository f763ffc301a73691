"""Line-delimited JSON log events."""

from __future__ import annotations

import json
import logging
import sys

# attributes every LogRecord carries; anything else came in through ``extra``
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        event = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED:
                event[key] = value
        if record.exc_info:
            event["exception"] = self.formatException(record.exc_info)
        return json.dumps(event, default=str)


def configure(level: int | str = logging.INFO, stream=None) -> logging.Handler:
    """Route ``concept_probe`` loggers to ``stream`` (stderr) as JSON lines."""
    root = logging.getLogger("concept_probe")
    for h in list(root.handlers):
        if getattr(h, "_concept_probe", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    handler._concept_probe = True
    root.addHandler(handler)
    root.setLevel(level)
    return handler
