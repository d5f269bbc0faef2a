from __future__ import annotations

from typing import Any


class QuasiFlowError(RuntimeError):
    def __init__(
        self,
        message: str,
        *,
        error_code: str = "QUASIFLOW_ERROR",
        exit_status: int = 4,
        details: dict[str, Any] | None = None,
    ) -> None:
        super().__init__(message)
        self.error_code = error_code
        self.exit_status = exit_status
        self.details = dict(details or {})

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_code": self.error_code,
            "message": str(self),
            "details": self.details,
        }


class InvalidArgumentError(QuasiFlowError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message, error_code="INVALID_ARGUMENT", details=details)


class CallbackEvaluationError(QuasiFlowError):
    def __init__(self, message: str, *, callback: str, point: list[float] | None = None) -> None:
        super().__init__(
            message,
            error_code="CALLBACK_FAILURE",
            details={"callback": callback, "point": point},
        )


class DerivativeMismatchError(QuasiFlowError):
    def __init__(self, message: str, *, callback: str, point: list[float], deviation: float) -> None:
        super().__init__(
            message,
            error_code="DERIVATIVE_MISMATCH",
            details={"callback": callback, "point": point, "deviation": deviation},
        )


class NonFiniteStateError(QuasiFlowError):
    def __init__(self, message: str, *, path_id: int, step: int) -> None:
        super().__init__(
            message,
            error_code="NON_FINITE_STATE",
            details={"path_id": path_id, "step": step},
        )


class DomainError(QuasiFlowError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message, error_code="DOMAIN_ERROR", details=details)


class OutOfRegionError(QuasiFlowError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message, error_code="OUT_OF_REGION", details=details)


class DegenerateNormalDiffusionError(QuasiFlowError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message, error_code="DEGENERATE_NORMAL", details=details)


class PreconditionError(QuasiFlowError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message, error_code="PRECONDITION", details=details)


class NotHarmonicError(QuasiFlowError):
    def __init__(self, message: str, *, residual: float, tolerance: float) -> None:
        super().__init__(
            message,
            error_code="NOT_HARMONIC",
            details={"residual": residual, "tolerance": tolerance},
        )


class GuardViolationError(QuasiFlowError):
    """Raised when a perturbation size breaks the time-change or measure-change guards.

    ``max_delta`` is the largest ladder value that satisfied both guards along
    the scanned coefficient trace, or 0 when none did.
    """

    def __init__(self, message: str, *, delta: float, max_delta: float, step: int, path_id: int) -> None:
        super().__init__(
            message,
            error_code="SMALLNESS_GUARD",
            details={"delta": delta, "max_delta": max_delta, "step": step, "path_id": path_id},
        )
        self.max_delta = max_delta


class ConfigError(QuasiFlowError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None, column: int | None = None) -> None:
        super().__init__(
            message,
            error_code="CONFIG_ERROR",
            exit_status=2,
            details={"field": field, "line": line, "column": column},
        )


class HypothesisFailure(QuasiFlowError):
    def __init__(self, message: str, *, failed: list[str]) -> None:
        super().__init__(
            message,
            error_code="HYPOTHESIS_FAILED",
            exit_status=3,
            details={"failed": failed},
        )
        self.failed = list(failed)
