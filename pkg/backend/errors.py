"""
Simulator Error Types
Shared exception hierarchy with stable machine-readable codes
"""

from typing import Any, Dict, List, Optional


class SimulatorError(Exception):
    """Base class for every error raised by the simulator"""

    code = "simulator_error"
    exit_status = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": str(self)}


class DomainError(SimulatorError, ValueError):
    """Argument outside the domain of an operation"""

    code = "domain_error"
    exit_status = 3


class CalibrationMissingError(SimulatorError, KeyError):
    """No calibration anchors for the requested wavelength"""

    code = "calibration_missing"
    exit_status = 3

    def __str__(self) -> str:
        # KeyError quotes its message otherwise
        return Exception.__str__(self)


class SequencingError(SimulatorError):
    """Events supplied out of time order"""

    code = "sequencing_error"
    exit_status = 3


class ParameterError(SimulatorError, ValueError):
    code = "parameter_error"
    exit_status = 3


class UndefinedEstimateError(SimulatorError):
    """An estimate was requested over an empty sample"""

    code = "undefined_estimate"
    exit_status = 3


class EmptyInputError(SimulatorError, ValueError):
    code = "empty_input"
    exit_status = 3


class IllDefinedPeakError(SimulatorError):
    """Histogram has no unique maximal region"""

    code = "ill_defined_peak"
    exit_status = 3


class ConfigError(SimulatorError):
    """Configuration document could not be parsed or validated"""

    code = "config_error"
    exit_status = 2

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ": " + "; ".join(self.problems)
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        payload = super().to_dict()
        payload["problems"] = self.problems
        return payload


class OutputError(SimulatorError):
    """Output could not be written or failed post-write validation"""

    code = "output_error"
    exit_status = 4
