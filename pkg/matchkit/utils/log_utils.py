#!/usr/bin/env python3

import logging
import logging.config
import warnings

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO") -> None:
    fmt = "%(message)s"
    if level == "DEBUG":
        fmt = "%(asctime)s [%(levelname)s] %(name)s:%(lineno)d: %(message)s"

    config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "standard": {"format": fmt},
        },
        "handlers": {
            "default": {
                "level": level,
                "formatter": "standard",
                "class": "logging.StreamHandler",
                "stream": "ext://sys.stderr",
            },
        },
        "loggers": {
            "matchkit": {
                "handlers": ["default"],
                "level": level,
                "propagate": False,
            },
            "PIL": {"level": "INFO"},
        },
    }
    logging.config.dictConfig(config)
    warnings.filterwarnings("ignore", message=".*TypedStorage is deprecated.*")
