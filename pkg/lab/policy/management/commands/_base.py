"""
Shared plumbing for the lab commands: exit codes, the seed override and
config-file loading.

Exit codes: 0 ok, 2 usage (argparse), 3 unreadable or corrupt file, 4 invalid config.
"""
import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from policy.exceptions import (
    CheckpointError,
    ConfigValidationError,
    DatasetIOError,
    InvalidRangeError,
    PolicyLabError,
    SamplerMismatchError,
    ShapeError,
    UnknownTaskError,
)
from policy.serializers import read_config, validate_config

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4


class LabCommand(BaseCommand):
    """Subclasses implement run(**options) instead of handle()."""

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CheckpointError as exc:
            where = f" (byte offset {exc.offset})" if exc.offset is not None else ""
            raise CommandError(f"{exc}{where}", returncode=EXIT_IO) from exc
        except (DatasetIOError, OSError) as exc:
            raise CommandError(str(exc), returncode=EXIT_IO) from exc
        except (ConfigValidationError, InvalidRangeError, ShapeError, UnknownTaskError,
                SamplerMismatchError) as exc:
            raise CommandError(str(exc), returncode=EXIT_VALIDATION) from exc
        except PolicyLabError as exc:
            raise CommandError(str(exc)) from exc

    def run(self, **options):
        raise NotImplementedError

    def seed(self, options):
        """--seed, unless DITA_DESK_SEED is set; None when neither is given."""
        override = getattr(settings, "DITA_DESK_SEED", None)
        if override not in (None, ""):
            try:
                return int(override)
            except ValueError:
                raise ConfigValidationError({"DITA_DESK_SEED": [f"not an integer: {override!r}"]})
        return options.get("seed")

    def workers(self, options) -> int:
        return int(options.get("workers") or getattr(settings, "DITA_DESK_WORKERS", 1))

    def load_section(self, serializer_class, path=None, section=None, overrides=None, defaults=None):
        """
        Serializer defaults < `defaults` (from settings) < config file section < CLI overrides.
        None-valued overrides are ignored. Returns validated data.
        """
        data = dict(defaults or {})
        if path:
            config = read_config(path)
            data.update(config.get(section, {}) if section else config)
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return dict(validate_config(serializer_class, data))

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
