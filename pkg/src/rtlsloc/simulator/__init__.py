"""Seeded discrete-event WLAN simulator emitting RTLS feeds."""

from __future__ import annotations

from .controller import CHANNEL_PLAN, ControllerPolicy, controller_tick
from .engine import ScanEvent, SimResult, Simulation, TruthRow, emit_rtls, run_ground_truth
from .propagation import BandPropagation, LinkTable, PropagationModel, mean_rssi, rssi_at
from .scanning import ClientState, GapProfile, ScanModel, schedule_scans
from .scenario import (
    ApNode,
    Building,
    ClientSim,
    SimScenario,
    TrafficModel,
    Visit,
    client_hash,
    desk_scenario,
    load_scenario,
    perfect_scenario,
    save_scenario,
    survey_scenario,
)

__all__ = [
    "CHANNEL_PLAN", "ControllerPolicy", "controller_tick",
    "ScanEvent", "SimResult", "Simulation", "TruthRow", "emit_rtls", "run_ground_truth",
    "BandPropagation", "LinkTable", "PropagationModel", "mean_rssi", "rssi_at",
    "ClientState", "GapProfile", "ScanModel", "schedule_scans",
    "ApNode", "Building", "ClientSim", "SimScenario", "TrafficModel", "Visit",
    "client_hash", "desk_scenario", "load_scenario", "perfect_scenario", "save_scenario", "survey_scenario",
]
