"""Trial-conduct HTTP service.

A trial team posts cohort outcomes as they occur and receives the next
dose assignments: conditional-EWOC combinations in stage 1, rejection-
sampled combinations plus posterior curves in stage 2.  State is an
append-only JSON-lines event log per trial; every recommendation is
computed from a per-trial seed and the submission index, so replaying the
log (or restarting the process) reproduces the state exactly.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .mcmc import MCMCConfig
from .model import (
    DomainError,
    DoseScale,
    MTDCurve,
    NoCurveError,
    Stage1Record,
    Stage2Record,
    ToxParams,
    ToxPriorConfig,
    TTPPriorConfig,
    dose_at_z,
    mtd_curve,
)
from .seeds import derive
from .stage1 import (
    Stage1Config,
    alpha_schedule,
    fit_stage1,
    next_dose_x_given_y,
    next_dose_y_given_x,
    posterior_median_params,
    safety_stop,
)
from .stage2 import (
    Stage2Config,
    analyze_stage2,
    fit_stage2,
    posterior_mean_median,
    rejection_sample_doses,
)

API_PREFIX = "/v1"
CURVE_POINTS = 101


# ---------------------------------------------------------------------------
# Request bodies
# ---------------------------------------------------------------------------

class TrialConfigIn(BaseModel):
    theta: float = 0.33
    stage1_n_max: int = 30
    start_raw_x: float = 15.0
    start_raw_y: float = 75.0
    alpha_start: float = 0.25
    alpha_cap: float = 0.5
    safety_threshold: float = 0.8
    x_min: float = 10.0
    x_max: float = 25.0
    y_min: float = 50.0
    y_max: float = 100.0
    med0: float = 4.0
    stage2_n_max: int = 30
    n1: int = 10
    n2: int = 5
    delta_u: float = 0.8
    delta_0: float = 0.10
    tox_margin: float = 0.1
    tox_monitor_threshold: float = 0.8
    mcmc_burn_in: int = 2000
    mcmc_keep: int = 2000
    seed: int | None = None
    idempotency_key: str | None = None


class Stage1OutcomeIn(BaseModel):
    x: float = Field(ge=0.0, le=1.0)
    y: float = Field(ge=0.0, le=1.0)
    dlt: int = Field(ge=0, le=1)


class Stage1OutcomesIn(BaseModel):
    outcomes: list[Stage1OutcomeIn] = Field(min_length=1)


class Stage2OutcomeIn(BaseModel):
    z: float = Field(ge=0.0, le=1.0)
    time: float = Field(gt=0.0)
    event: int = Field(ge=0, le=1)
    dlt: int = Field(ge=0, le=1)


class Stage2OutcomesIn(BaseModel):
    outcomes: list[Stage2OutcomeIn] = Field(min_length=1)


# ---------------------------------------------------------------------------
# Trial state (pure fold over the event log)
# ---------------------------------------------------------------------------

@dataclass
class TrialState:
    id: str
    seed: int
    config: dict
    stage: int = 1
    s1_records: list = field(default_factory=list)
    s1_submissions: int = 0
    x_last: float = 0.0
    y_last: float = 0.0
    stage1_stopped: bool = False
    curve_params: dict | None = None
    s2_records: list = field(default_factory=list)
    s2_submissions: int = 0
    stage2_stopped: str | None = None
    last_recommendation: dict | None = None
    event_count: int = 0

    def stage1_config(self) -> Stage1Config:
        c = self.config
        scale = DoseScale(c["x_min"], c["x_max"], c["y_min"], c["y_max"])
        return Stage1Config(
            n_max=c["stage1_n_max"], theta=c["theta"],
            start_dose=scale.from_raw(c["start_raw_x"], c["start_raw_y"]),
            alpha_start=c["alpha_start"], alpha_cap=c["alpha_cap"],
            prior=ToxPriorConfig(), safety_threshold=c["safety_threshold"],
            mcmc=MCMCConfig(burn_in=c["mcmc_burn_in"], keep=c["mcmc_keep"]),
            scale=scale)

    def stage2_config(self) -> Stage2Config:
        c = self.config
        return Stage2Config(
            n_max=c["stage2_n_max"], n1=c["n1"], n2=c["n2"], med0=c["med0"],
            delta_u=c["delta_u"], delta_0=c["delta_0"],
            tox_target=c["theta"], tox_margin=c["tox_margin"],
            tox_monitor_threshold=c["tox_monitor_threshold"],
            prior=TTPPriorConfig(),
            mcmc=MCMCConfig(burn_in=c["mcmc_burn_in"], keep=c["mcmc_keep"]))

    def scale(self) -> DoseScale:
        c = self.config
        return DoseScale(c["x_min"], c["x_max"], c["y_min"], c["y_max"])

    def curve(self) -> MTDCurve | None:
        if self.curve_params is None:
            return None
        p = self.curve_params
        return MTDCurve(params=ToxParams(p["rho00"], p["rho10"], p["rho01"],
                                         p["eta3"]),
                        theta=p["theta"], x_lo=p["x_lo"], x_hi=p["x_hi"])

    def apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "created":
            self.config = event["config"]
            self.seed = event["seed"]
            start = self.stage1_config().start_dose
            self.x_last, self.y_last = start.x, start.y
            self.last_recommendation = event["recommendation"]
        elif kind == "stage1_outcomes":
            outs = [Stage1Record(o["x"], o["y"], o["dlt"])
                    for o in event["outcomes"]]
            self.s1_records.extend(outs)
            if len(outs) == 2:
                self.x_last = outs[0].x
                self.y_last = outs[1].y
            self.s1_submissions += 1
            rec = event["recommendation"]
            self.stage1_stopped = rec["safety_stop"]
            self.last_recommendation = rec
        elif kind == "stage1_finalized":
            self.curve_params = event["curve"]
            self.stage = 2
        elif kind == "stage2_outcomes":
            self.s2_records.extend(
                Stage2Record(z=o["z"], time=o["time"], delta=o["event"],
                             dlt=o["dlt"]) for o in event["outcomes"])
            self.s2_submissions += 1
            rec = event["recommendation"]
            if rec["toxicity_stop"]:
                self.stage2_stopped = "toxicity"
            elif rec["futility_stop"]:
                self.stage2_stopped = "futility"
            self.last_recommendation = rec
        else:
            raise ValueError(f"unknown event type {kind!r}")
        self.event_count += 1

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "stage": self.stage,
            "config": self.config,
            "stage1": {
                "records": [{"x": r.x, "y": r.y, "dlt": r.dlt}
                            for r in self.s1_records],
                "submissions": self.s1_submissions,
                "stopped_for_safety": self.stage1_stopped,
                "n_enrolled": len(self.s1_records),
            },
            "curve": self.curve_params,
            "stage2": {
                "records": [{"z": r.z, "time": r.time, "event": r.delta,
                             "dlt": r.dlt} for r in self.s2_records],
                "submissions": self.s2_submissions,
                "stopped": self.stage2_stopped,
                "n_enrolled": len(self.s2_records),
            },
            "last_recommendation": self.last_recommendation,
            "event_count": self.event_count,
        }


class TrialStore:
    """Append-only event-log persistence with in-memory replay."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)
        self.trials: dict[str, TrialState] = {}
        self.locks: dict[str, threading.Lock] = {}
        self.idempotency: dict[str, str] = {}
        self._store_lock = threading.Lock()
        for name in sorted(os.listdir(data_dir)):
            if name.endswith(".jsonl"):
                self._load(name[:-6])

    def _path(self, trial_id: str) -> str:
        return os.path.join(self.data_dir, f"{trial_id}.jsonl")

    def _load(self, trial_id: str) -> None:
        state = TrialState(id=trial_id, seed=0, config={})
        with open(self._path(trial_id)) as fh:
            for line in fh:
                event = json.loads(line)
                state.apply(event)
                if event["type"] == "created" and event.get("idempotency_key"):
                    self.idempotency[event["idempotency_key"]] = trial_id
        self.trials[trial_id] = state
        self.locks[trial_id] = threading.Lock()

    def create(self, config: dict, seed: int, idempotency_key: str | None,
               recommendation: dict) -> TrialState:
        with self._store_lock:
            if idempotency_key and idempotency_key in self.idempotency:
                return self.trials[self.idempotency[idempotency_key]]
            trial_id = secrets.token_hex(8)
            state = TrialState(id=trial_id, seed=seed, config={})
            event = {"type": "created", "config": config, "seed": seed,
                     "idempotency_key": idempotency_key,
                     "recommendation": recommendation}
            with open(self._path(trial_id), "w") as fh:
                fh.write(json.dumps(event) + "\n")
            state.apply(event)
            self.trials[trial_id] = state
            self.locks[trial_id] = threading.Lock()
            if idempotency_key:
                self.idempotency[idempotency_key] = trial_id
            return state

    def append(self, trial_id: str, event: dict) -> None:
        # persist before the in-memory state mutates and before responding
        with open(self._path(trial_id), "a") as fh:
            fh.write(json.dumps(event) + "\n")
        self.trials[trial_id].apply(event)

    def get(self, trial_id: str) -> TrialState:
        if trial_id not in self.trials:
            raise HTTPException(404, f"unknown trial {trial_id!r}")
        return self.trials[trial_id]

    def lock(self, trial_id: str) -> threading.Lock:
        return self.locks[trial_id]


# ---------------------------------------------------------------------------
# Recommendation computation (deterministic given trial seed + indices)
# ---------------------------------------------------------------------------

def _dose_json(d) -> dict:
    return {"x": d.x, "y": d.y, "raw_x": d.raw_x, "raw_y": d.raw_y}


def stage1_recommendation(state: TrialState) -> dict:
    cfg = state.stage1_config()
    chain = fit_stage1(state.s1_records, cfg.prior, cfg.mcmc,
                       derive(state.seed, 1, state.s1_submissions))
    stopped = safety_stop(chain, cfg.theta, cfg)
    alpha = alpha_schedule(min(len(state.s1_records), cfg.n_max), cfg)
    rec = {"safety_stop": stopped, "alpha": alpha, "cohort": []}
    if not stopped and len(state.s1_records) < cfg.n_max:
        x_new = next_dose_x_given_y(chain, state.y_last, alpha, cfg.theta)
        y_new = next_dose_y_given_x(chain, state.x_last, alpha, cfg.theta)
        d1 = cfg.scale.combination(x_new, state.y_last)
        d2 = cfg.scale.combination(state.x_last, y_new)
        rec["cohort"] = [_dose_json(d1), _dose_json(d2)]
    return rec


def stage1_final_curve(state: TrialState) -> dict:
    cfg = state.stage1_config()
    chain = fit_stage1(state.s1_records, cfg.prior, cfg.mcmc,
                       derive(state.seed, 1, state.s1_submissions - 1))
    params = posterior_median_params(chain)
    try:
        curve = mtd_curve(params, cfg.theta)
    except NoCurveError:
        raise HTTPException(409, "posterior medians admit no MTD curve "
                                 "inside the dose square")
    return {"rho00": params.rho00, "rho10": params.rho10,
            "rho01": params.rho01, "eta3": params.eta3,
            "theta": cfg.theta, "x_lo": curve.x_lo, "x_hi": curve.x_hi}


def stage2_recommendation(state: TrialState) -> dict:
    cfg = state.stage2_config()
    curve = state.curve()
    chain = fit_stage2(state.s2_records, cfg.prior, cfg.mcmc,
                       derive(state.seed, 2, state.s2_submissions))
    analysis = analyze_stage2(state.s2_records, cfg, chain)
    rec = {
        "toxicity_stop": analysis.toxicity,
        "futility_stop": analysis.futility,
        "z_opt": analysis.z_opt,
        "max_prob": analysis.max_prob,
        "prob_exceed": [{"z": float(z), "prob": float(p)}
                        for z, p in zip(analysis.prob_curve.grid,
                                        analysis.prob_curve.probs)],
        "cohort": [],
    }
    stopped = analysis.toxicity or analysis.futility
    if not stopped and len(state.s2_records) < cfg.n_max:
        rng = np.random.default_rng(derive(state.seed, 3, state.s2_submissions))
        zs = rejection_sample_doses(chain, cfg.n2, rng, cfg.envelope_grid)
        rec["cohort"] = [{"z": float(z),
                          **_dose_json(dose_at_z(curve, float(z), state.scale()))}
                         for z in zs]
    return rec


def compute_curves(state: TrialState) -> dict:
    out = {"mtd_curve": None, "median_ttp": None, "prob_exceed": None}
    curve = state.curve()
    if curve is not None:
        zs = np.linspace(0.0, 1.0, CURVE_POINTS)
        pts = []
        for z in zs:
            d = dose_at_z(curve, float(z), state.scale())
            pts.append({"z": float(z), **_dose_json(d)})
        out["mtd_curve"] = pts
    if state.s2_records:
        cfg = state.stage2_config()
        chain = fit_stage2(state.s2_records, cfg.prior, cfg.mcmc,
                           derive(state.seed, 2, state.s2_submissions - 1))
        grid = np.linspace(0.0, 1.0, CURVE_POINTS)
        med = posterior_mean_median(chain, grid)
        analysis = analyze_stage2(state.s2_records, cfg, chain)
        out["median_ttp"] = [{"z": float(z), "value": float(v)}
                             for z, v in zip(grid, med)]
        out["prob_exceed"] = [{"z": float(z), "prob": float(p)}
                              for z, p in zip(analysis.prob_curve.grid,
                                              analysis.prob_curve.probs)]
    return out


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def create_app(data_dir: str = "trials") -> FastAPI:
    app = FastAPI(title="combidose conduct service", version="1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    store = TrialStore(data_dir)
    app.state.store = store

    @app.post(f"{API_PREFIX}/trials", status_code=201)
    def create_trial(body: TrialConfigIn):
        config = body.model_dump(exclude={"seed", "idempotency_key"})
        try:
            probe = TrialState(id="probe", seed=0, config=config)
            s1 = probe.stage1_config()
            probe.stage2_config()
        except (DomainError, ValueError) as e:
            raise HTTPException(400, f"invalid trial configuration: {e}")
        seed = body.seed if body.seed is not None else secrets.randbits(63)
        start = s1.start_dose
        recommendation = {"safety_stop": False,
                          "alpha": s1.alpha_start,
                          "cohort": [_dose_json(start), _dose_json(start)]}
        state = store.create(config, seed, body.idempotency_key, recommendation)
        return {"id": state.id, "stage": state.stage,
                "recommendation": state.last_recommendation}

    @app.post(f"{API_PREFIX}/trials/{{trial_id}}/stage1/outcomes")
    def submit_stage1(trial_id: str, body: Stage1OutcomesIn):
        state = store.get(trial_id)
        with store.lock(trial_id):
            if state.stage != 1:
                raise HTTPException(409, "trial is not in stage 1")
            if state.stage1_stopped:
                raise HTTPException(409, "trial stopped for safety")
            cfg = state.stage1_config()
            if len(state.s1_records) + len(body.outcomes) > cfg.n_max:
                raise HTTPException(409, "enrolling beyond the stage-1 sample size")
            shadow = TrialState(id=state.id, seed=state.seed,
                                config=state.config)
            shadow.s1_records = state.s1_records + [
                Stage1Record(o.x, o.y, o.dlt) for o in body.outcomes]
            shadow.s1_submissions = state.s1_submissions + 1
            outs = body.outcomes
            shadow.x_last = outs[0].x if len(outs) == 2 else state.x_last
            shadow.y_last = outs[-1].y if len(outs) == 2 else state.y_last
            rec = stage1_recommendation(shadow)
            store.append(trial_id, {
                "type": "stage1_outcomes",
                "outcomes": [o.model_dump() for o in body.outcomes],
                "recommendation": rec})
            return {"id": trial_id, "recommendation": rec,
                    "n_enrolled": len(state.s1_records)}

    @app.post(f"{API_PREFIX}/trials/{{trial_id}}/stage1/finalize")
    def finalize_stage1(trial_id: str):
        state = store.get(trial_id)
        with store.lock(trial_id):
            if state.stage == 2:
                return {"id": trial_id, "curve": state.curve_params}
            if state.s1_submissions == 0:
                raise HTTPException(409, "no stage-1 outcomes submitted yet")
            if state.stage1_stopped:
                raise HTTPException(409, "trial stopped for safety")
            curve = stage1_final_curve(state)
            store.append(trial_id, {"type": "stage1_finalized", "curve": curve})
            return {"id": trial_id, "curve": curve}

    @app.post(f"{API_PREFIX}/trials/{{trial_id}}/stage2/outcomes")
    def submit_stage2(trial_id: str, body: Stage2OutcomesIn):
        state = store.get(trial_id)
        with store.lock(trial_id):
            if state.stage != 2:
                raise HTTPException(409, "trial is not in stage 2")
            if state.stage2_stopped:
                raise HTTPException(409, f"trial stopped ({state.stage2_stopped})")
            cfg = state.stage2_config()
            if len(state.s2_records) + len(body.outcomes) > cfg.n_max:
                raise HTTPException(409, "enrolling beyond the stage-2 sample size")
            shadow = TrialState(id=state.id, seed=state.seed,
                                config=state.config,
                                curve_params=state.curve_params)
            shadow.s2_records = state.s2_records + [
                Stage2Record(z=o.z, time=o.time, delta=o.event, dlt=o.dlt)
                for o in body.outcomes]
            shadow.s2_submissions = state.s2_submissions + 1
            rec = stage2_recommendation(shadow)
            store.append(trial_id, {
                "type": "stage2_outcomes",
                "outcomes": [o.model_dump() for o in body.outcomes],
                "recommendation": rec})
            return {"id": trial_id, "recommendation": rec,
                    "n_enrolled": len(state.s2_records)}

    @app.get(f"{API_PREFIX}/trials/{{trial_id}}")
    def get_state(trial_id: str):
        return store.get(trial_id).to_json()

    @app.get(f"{API_PREFIX}/trials/{{trial_id}}/curves")
    def get_curves(trial_id: str):
        state = store.get(trial_id)
        return compute_curves(state)

    @app.get(f"{API_PREFIX}/schema")
    def get_schema():
        return RESPONSE_SCHEMA

    return app


# JSON Schema for the public response and submission shapes; the companion
# UI validates against this same document.
RESPONSE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "combidose conduct API",
    "$defs": {
        "dose": {
            "type": "object",
            "required": ["x", "y", "raw_x", "raw_y"],
            "properties": {
                "x": {"type": "number", "minimum": 0, "maximum": 1},
                "y": {"type": "number", "minimum": 0, "maximum": 1},
                "raw_x": {"type": "number"},
                "raw_y": {"type": "number"},
            },
        },
        "stage1_outcome": {
            "type": "object",
            "required": ["x", "y", "dlt"],
            "properties": {
                "x": {"type": "number", "minimum": 0, "maximum": 1},
                "y": {"type": "number", "minimum": 0, "maximum": 1},
                "dlt": {"type": "integer", "minimum": 0, "maximum": 1},
            },
        },
        "stage2_outcome": {
            "type": "object",
            "required": ["z", "time", "event", "dlt"],
            "properties": {
                "z": {"type": "number", "minimum": 0, "maximum": 1},
                "time": {"type": "number", "exclusiveMinimum": 0},
                "event": {"type": "integer", "minimum": 0, "maximum": 1},
                "dlt": {"type": "integer", "minimum": 0, "maximum": 1},
            },
        },
        "zcurve_point": {
            "type": "object",
            "required": ["z"],
            "properties": {"z": {"type": "number"},
                           "prob": {"type": "number", "minimum": 0, "maximum": 1},
                           "value": {"type": "number"}},
        },
        "recommendation": {
            "type": "object",
            "properties": {
                "cohort": {"type": "array"},
                "alpha": {"type": "number"},
                "safety_stop": {"type": "boolean"},
                "futility_stop": {"type": "boolean"},
                "toxicity_stop": {"type": "boolean"},
                "z_opt": {"type": "number"},
                "max_prob": {"type": "number"},
                "prob_exceed": {"type": "array",
                                "items": {"$ref": "#/$defs/zcurve_point"}},
            },
        },
        "trial_state": {
            "type": "object",
            "required": ["id", "stage", "config", "stage1", "stage2",
                         "event_count"],
            "properties": {
                "id": {"type": "string"},
                "stage": {"type": "integer", "enum": [1, 2]},
                "config": {"type": "object"},
                "stage1": {"type": "object"},
                "curve": {"type": ["object", "null"]},
                "stage2": {"type": "object"},
                "last_recommendation": {"type": ["object", "null"]},
                "event_count": {"type": "integer"},
            },
        },
        "curves": {
            "type": "object",
            "required": ["mtd_curve", "median_ttp", "prob_exceed"],
            "properties": {
                "mtd_curve": {"type": ["array", "null"],
                              "items": {"$ref": "#/$defs/dose"}},
                "median_ttp": {"type": ["array", "null"],
                               "items": {"$ref": "#/$defs/zcurve_point"}},
                "prob_exceed": {"type": ["array", "null"],
                                "items": {"$ref": "#/$defs/zcurve_point"}},
            },
        },
    },
}
