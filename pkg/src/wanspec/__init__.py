"""Speculative decoding split across a WAN: a draft worker and a target controller."""

from .controller import Controller, ControllerConfig
from .oracle import OracleConfig, SequenceView, open_oracle
from .sim import PROFILES, SimConfig, run_sim
from .spectree import SpecTree
from .worker import Worker, WorkerConfig

__all__ = [
    "PROFILES",
    "Controller",
    "ControllerConfig",
    "OracleConfig",
    "SequenceView",
    "SimConfig",
    "SpecTree",
    "Worker",
    "WorkerConfig",
    "open_oracle",
    "run_sim",
]
