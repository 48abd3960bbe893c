"""Service layer: orchestration across the core modules."""

from . import evaluation_service, gradcheck_service, loso_service, training_service, transfer_service

__all__ = ["evaluation_service", "gradcheck_service", "loso_service", "training_service", "transfer_service"]
