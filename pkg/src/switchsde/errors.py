"""Error codes shared across the package.

Every failure mode carries a stable short code so the CLI can map it to an
exit status and reports can name it without string matching on messages.
"""

from __future__ import annotations


class SwitchSdeError(Exception):
    """Base class; ``code`` is the stable machine-readable identifier."""

    code = "E_GENERIC"

    def __init__(self, message: str):
        super().__init__(f"{self.code}: {message}")
        self.message = message


class ShapeError(SwitchSdeError):
    """Matrix or vector dimensions inconsistent with the declared model."""

    code = "E_SHAPE"


class RatesError(SwitchSdeError):
    """Switching-rate matrix violates sign or row-sum rules."""

    code = "E_RATES"


class StepError(SwitchSdeError):
    """Time step violates a stepping precondition."""

    code = "E_STEP"


class NanError(SwitchSdeError):
    """A simulated state became non-finite."""

    code = "E_NAN"


class UnboundedError(SwitchSdeError):
    """Operation requires a bounded running cost."""

    code = "E_UNBOUNDED"


class MaxIterError(SwitchSdeError):
    """Iteration budget exhausted without reaching tolerance."""

    code = "E_MAXITER"


class BlowupError(SwitchSdeError):
    """Integrated quantity exceeded the blow-up guard."""

    code = "E_BLOWUP"


class EigError(SwitchSdeError):
    """Definiteness or conditioning requirement failed."""

    code = "E_EIG"


class ConfigError(SwitchSdeError):
    """Configuration document rejected; ``path`` names the offending field."""

    code = "E_CONFIG"

    def __init__(self, message: str, path: str = ""):
        self.path = path
        where = f" at '{path}'" if path else ""
        super().__init__(f"{message}{where}")


class IoError(SwitchSdeError):
    """Output files could not be written."""

    code = "E_IO"


class CapFractionWarning(UserWarning):
    """More than 1 percent of exit paths hit the time cap."""

    code = "E_CAPFRAC"
