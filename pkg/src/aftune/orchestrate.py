"""Client-side verification orchestration.

Builds self-contained verification requests out of a recorded run
(ledger + tensor store, or a deterministic rerun in zero-storage mode),
reconstructs model state from sparse checkpoints, walks the cross-block
trust chain, and can hand requests to an isolated verifier process.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import BlockGrid, BlockId, BoundaryKey
from .hashing import chunked_hash
from .ledger import RunLedger
from .model import ModelState, build_model, param_bytes
from .optim import build_optimizer
from .recorder import LEDGER_FILE, RunContext, materialize_block_tensors
from .store import EvidenceReleasedError, TensorStore
from .verifier import (DEFAULT_MEMORY_BUDGET, EVIDENCE_RELEASED,
                       BlockReplayer, VerificationReport, VerificationRequest,
                       load_layer_params, verify_block)

DEFAULT_TAU = {"f32": 1e-5, "f64": 1e-12}


class ReconstructionError(Exception):
    pass


class NonDeterministicBlockError(ReconstructionError):
    """Replay through a non-deterministic layer cannot be bit-exact; the
    layer must be isolated into its own singleton block (which then
    checkpoints at every step block)."""


def _block_is_deterministic(layers, grid: BlockGrid, i: int) -> bool:
    return all(getattr(layers[l], "deterministic", True)
               for l in grid.block_layers(i))


def _block_checkpoint_bytes(ctx: RunContext, store: TensorStore, i: int,
                            t_target: int, labels_needed: bool):
    """Parameter and optimizer blobs for layer block i at step t_target,
    replayed forward from the nearest prior checkpoint when t_target is
    not itself checkpointed."""
    grid = ctx.grid
    layer_ids = list(grid.block_layers(i))
    ckpts = [t for t in grid.checkpoint_steps(i) if t <= t_target]
    t0 = max(ckpts) if ckpts else 0
    fresh = build_model(ctx.manifest["model"])
    if t0 < t_target and not _block_is_deterministic(fresh, grid, i):
        raise NonDeterministicBlockError(
            f"layer block {i} contains a non-deterministic layer; replaying "
            f"steps {t0}..{t_target} cannot be bit-exact. Isolate the layer "
            f"(isolate_layers) so it checkpoints at every step block.")
    if ckpts:
        params = {l: store.get_bytes(BoundaryKey("parameter", l, t0))
                  for l in layer_ids}
        opts = {l: store.get_bytes(BoundaryKey("optimizer-state", l, t0))
                for l in layer_ids}
    else:
        # no stored checkpoint covers t_target, but the step-0 state is
        # derivable from the manifest alone: base init, zeroed optimizer
        opt = build_optimizer(ctx.manifest["optimizer"], fresh)
        params = {l: param_bytes(fresh[l]) for l in layer_ids}
        opts = {l: opt.state_bytes(l, fresh[l]) for l in layer_ids}
    if t0 == t_target:
        return params, opts
    rep = BlockReplayer(ctx.manifest["model"], ctx.manifest["optimizer"],
                        layer_ids, params, opts)
    for t in range(t0, t_target):
        x = store.get_tensor(BoundaryKey("activation", i, t))
        upstream = store.get_tensor(BoundaryKey("gradient", i + 1, t))
        labels = ctx.batch(t).labels if labels_needed else None
        rep.replay_step(x, upstream, labels=labels)
    return ({l: rep.param_blob(l) for l in layer_ids},
            {l: rep.opt_blob(l) for l in layer_ids})


def reconstruct_state(run_dir, step: int) -> ModelState:
    """Rebuild the full model/optimizer state at ``step`` (which must be
    a step-block boundary) from sparse checkpoints plus per-block replay,
    and require bitwise agreement with the ledger's parameter digests."""
    run_dir = Path(run_dir)
    ledger = RunLedger.load(run_dir / LEDGER_FILE)
    ctx = RunContext(ledger.manifest)
    grid, config = ctx.grid, ctx.config
    starts = {a for a, _ in grid.step_blocks} | {config.n_steps}
    if step not in starts:
        raise ReconstructionError(f"step {step} is not a step-block boundary")
    if config.zero_storage:
        raise ReconstructionError(
            "zero-storage run: reconstruct by deterministic rerun instead")
    store = TensorStore(run_dir)
    head_layer = config.n_layers - 1
    param_blobs: dict[int, bytes] = {}
    opt_blobs: dict[int, bytes] = {}
    for i in range(grid.n_layer_blocks):
        needs_labels = head_layer in grid.block_layers(i)
        p, o = _block_checkpoint_bytes(ctx, store, i, step, needs_labels)
        param_blobs.update(p)
        opt_blobs.update(o)

    digests = ledger.all_digests()
    mismatched = []
    for l in range(config.n_layers):
        for kind, blob in (("parameter", param_blobs[l]),
                           ("optimizer-state", opt_blobs[l])):
            key = BoundaryKey(kind, l, step)
            got = chunked_hash(blob, config.chunk_size, ctx.algo)
            if key not in digests or digests[key].value != got.value:
                mismatched.append(str(key))
    if mismatched:
        raise ReconstructionError(
            f"reconstructed state disagrees with ledger at: {mismatched}")

    layers = build_model(ctx.manifest["model"])
    for l, layer in enumerate(layers):
        load_layer_params(layer, param_blobs[l])
    opt = build_optimizer(ctx.manifest["optimizer"], layers)
    from .verifier import load_opt_state
    counters = {load_opt_state(opt, l, layer, opt_blobs[l])
                for l, layer in enumerate(layers)}
    opt.step_count = counters.pop() if len(counters) == 1 else step
    return ModelState(layers=layers, opt=opt, t=step)


# -- building requests ---------------------------------------------------


def gather_request(run_dir, bid: BlockId, tau: float | None = None,
                   precision: str | None = None, full_scan: bool = False,
                   memory_budget: int = DEFAULT_MEMORY_BUDGET,
                   ) -> VerificationRequest | VerificationReport:
    """Assemble everything the verifier needs for one block.

    Returns a VerificationReport directly (verdict 'evidence-released')
    when a required blob was pruned and cannot be rematerialized.
    """
    run_dir = Path(run_dir)
    ledger = RunLedger.load(run_dir / LEDGER_FILE)
    manifest = ledger.manifest
    if manifest["mode"] == "inference":
        return _gather_inference(run_dir, ledger, bid, tau, precision,
                                 full_scan, memory_budget)
    ctx = RunContext(manifest)
    grid, config = ctx.grid, ctx.config
    precision = precision or config.precision
    tau = config.tau if tau is None else tau
    i, j = bid.i, bid.j
    t_in, t_out = grid.commitment_boundary_steps(j)
    layer_ids = list(grid.block_layers(i))
    steps = list(grid.block_steps(j))
    head_layer = config.n_layers - 1
    needs_labels = head_layer in layer_ids

    digests = ledger.all_digests()
    wanted_keys = grid.commitment_keys(bid)
    ledger_digests = {str(k): digests[k] for k in wanted_keys}

    tensors: dict[str, np.ndarray | bytes] = {}
    try:
        if config.zero_storage:
            mat = materialize_block_tensors(manifest, set(wanted_keys))
            for k in wanted_keys:
                if k not in mat:
                    continue
                v = mat[k]
                if k.kind in ("activation", "gradient"):
                    tensors[str(k)] = v
                else:
                    tensors[str(k)] = v.tobytes()
        else:
            store = TensorStore(run_dir)
            for t in steps:
                for b in (i, i + 1):
                    for kind in ("activation", "gradient"):
                        k = BoundaryKey(kind, b, t)
                        tensors[str(k)] = store.get_tensor(k)
            p, o = _block_checkpoint_bytes(ctx, store, i, t_in, needs_labels)
            for l in layer_ids:
                tensors[str(BoundaryKey("parameter", l, t_in))] = p[l]
                tensors[str(BoundaryKey("optimizer-state", l, t_in))] = o[l]
            # exit blobs are optional: included when checkpointed
            for l in layer_ids:
                for kind in ("parameter", "optimizer-state"):
                    k = BoundaryKey(kind, l, t_out)
                    if store.has_blob(k):
                        tensors[str(k)] = store.get_bytes(k)
    except EvidenceReleasedError as e:
        return VerificationReport(block=bid, verdict=EVIDENCE_RELEASED,
                                  note=str(e))

    labels = {t: ctx.batch(t).labels for t in steps} if needs_labels else {}
    return VerificationRequest(
        block=bid, mode="training", tau=tau, precision=precision,
        grid=config.to_dict(), model=manifest["model"],
        optimizer=manifest["optimizer"], tensors=tensors,
        ledger_digests=ledger_digests, labels=labels,
        chunk_size=config.chunk_size, algo=ctx.algo,
        memory_budget=memory_budget, full_scan=full_scan,
    )


def _gather_inference(run_dir, ledger, bid, tau, precision, full_scan,
                      memory_budget):
    manifest = ledger.manifest
    from .grid import GridConfig
    config = GridConfig.from_dict(manifest["grid"])
    grid = BlockGrid(config)
    precision = precision or config.precision
    tau = config.tau if tau is None else tau
    store = TensorStore(run_dir)
    bounds = grid.inference_boundaries()
    lo = max(b for b in bounds if b <= bid.i)
    hi = min(b for b in bounds if b > bid.i)
    layer_ids = range(grid.boundary_layer(lo), grid.boundary_layer(hi))
    tensors: dict[str, np.ndarray | bytes] = {}
    try:
        for b in (lo, hi):
            k = BoundaryKey("activation", b, 0)
            tensors[str(k)] = store.get_tensor(k)
    except EvidenceReleasedError as e:
        return VerificationReport(block=bid, verdict=EVIDENCE_RELEASED,
                                  note=str(e))
    # the full served parameter set travels with the request: the digest
    # binding covers every layer, not just the replayed span
    params_dir = Path(run_dir) / "params"
    layers = _inference_layers(manifest, params_dir)
    for l in range(len(layers)):
        tensors[str(BoundaryKey("parameter", l, 0))] = param_bytes(layers[l])
    digests = ledger.all_digests()
    keys = [BoundaryKey("activation", b, 0) for b in (lo, hi)]
    return VerificationRequest(
        block=bid, mode="inference", tau=tau, precision=precision,
        grid=config.to_dict(), model=manifest["model"], optimizer=None,
        tensors=tensors, ledger_digests={str(k): digests[k] for k in keys},
        model_digest=manifest["model_digest"], chunk_size=config.chunk_size,
        algo=manifest["hash_algo"], memory_budget=memory_budget,
        full_scan=full_scan,
    )


def save_inference_params(run_dir, layers) -> None:
    """Persist the served parameter set next to an inference recording so
    verification requests can include it."""
    pdir = Path(run_dir) / "params"
    pdir.mkdir(parents=True, exist_ok=True)
    for l, layer in enumerate(layers):
        (pdir / f"{l}.bin").write_bytes(param_bytes(layer))


def _inference_layers(manifest, params_dir: Path):
    layers = build_model(manifest["model"])
    if params_dir.exists():
        for l, layer in enumerate(layers):
            blob = params_dir / f"{l}.bin"
            if blob.exists():
                load_layer_params(layer, blob.read_bytes())
    return layers


# -- running the verifier ------------------------------------------------


def run_verification(run_dir, bid: BlockId, isolated: bool = False,
                     **kw) -> VerificationReport:
    req = gather_request(run_dir, bid, **kw)
    if isinstance(req, VerificationReport):
        return req
    if not isolated:
        return verify_block(req)
    proc = subprocess.run(
        [sys.executable, "-m", "aftune.verifier_worker"],
        input=req.to_bytes(), stdout=subprocess.PIPE, check=True)
    return VerificationReport.from_json(json.loads(proc.stdout))


# -- trust chain ---------------------------------------------------------


@dataclass
class ChainReport:
    ok: bool
    problems: list[str] = field(default_factory=list)
    anchored: dict[str, int] = field(default_factory=dict)
    checked: int = 0
    bad_blocks: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"ok": self.ok, "problems": self.problems,
                "anchored": self.anchored, "checked": self.checked,
                "bad_blocks": self.bad_blocks}


def check_trust_chain(ledger: RunLedger, store: TensorStore | None = None) -> ChainReport:
    """Confirm every digest a block's verification consumes is vouched
    for: by a sealed neighbor commitment, or by a trust anchor in the
    manifest (inputs/labels per step, the base model for row 0)."""
    report = ChainReport(ok=True)
    manifest = ledger.manifest
    grid = ledger.grid
    n_lb = grid.n_layer_blocks
    bad: set[str] = set()
    current_block: list = [None]

    def problem(msg):
        report.ok = False
        report.problems.append(msg)
        if current_block[0] is not None:
            bad.add(str(current_block[0]))

    def anchored(kind):
        report.anchored[kind] = report.anchored.get(kind, 0) + 1

    def vouched_by(neighbor: BlockId, key: BoundaryKey, digest) -> bool:
        e = ledger.entry_for(neighbor)
        if e is None:
            problem(f"missing neighbor commitment {neighbor} for {key}")
            return False
        if key not in e.entries:
            problem(f"neighbor {neighbor} does not commit {key}")
            return False
        if e.entries[key].value != digest.value:
            problem(f"digest conflict with neighbor {neighbor} on {key}")
            return False
        return True

    for e in ledger.entries:
        report.checked += 1
        current_block[0] = e.block
        i, j = e.block.i, e.block.j
        t_in, _ = grid.commitment_boundary_steps(j)
        for t in grid.block_steps(j):
            akey = BoundaryKey("activation", i, t)
            if i > 0:
                vouched_by(BlockId(i - 1, j), akey, e.entries[akey])
            else:
                want = manifest["input_anchors"][t]
                if e.entries[akey].hex != want:
                    problem(f"{akey} does not match the input anchor for step {t}")
                else:
                    anchored("input")
            gkey = BoundaryKey("gradient", i + 1, t)
            if i < n_lb - 1:
                vouched_by(BlockId(i + 1, j), gkey, e.entries[gkey])
            else:
                # loss-side seed: fixed by the committed labels for step t
                if t >= len(manifest.get("label_anchors", [])):
                    problem(f"no label anchor for step {t} backing {gkey}")
                else:
                    anchored("label")
        for l in grid.block_layers(i):
            for kind in ("parameter", "optimizer-state"):
                pkey = BoundaryKey(kind, l, t_in)
                if j > 0:
                    vouched_by(BlockId(i, j - 1), pkey, e.entries[pkey])
                elif "base_model_digest" not in manifest:
                    problem(f"row 0 {pkey} has no base-model anchor")
                else:
                    anchored("base-model")

    # when evidence is on hand, tie the row-0 parameters to the anchor value
    if report.ok and store is not None and "base_model_digest" in manifest \
            and manifest["mode"] == "training":
        got = _recompute_base_digest(manifest, store)
        if got is not None and got != manifest["base_model_digest"]:
            current_block[0] = None
            problem("stored step-0 parameters do not match the base-model anchor")
            bad.update(str(BlockId(i, 0)) for i in range(n_lb))
    report.bad_blocks = sorted(bad)
    return report


def _recompute_base_digest(manifest, store: TensorStore) -> str | None:
    config_d = manifest["grid"]
    chunk, algo = config_d["chunk_size"], manifest["hash_algo"]
    layers = build_model(manifest["model"])
    parts = []
    for l, layer in enumerate(layers):
        key = BoundaryKey("parameter", l, 0)
        if not store.has_blob(key):
            return None  # pruned; nothing to recompute against
        load_layer_params(layer, store.get_bytes(key))
        for p in layer.params.values():
            parts.append(chunked_hash(p, chunk, algo).value)
    return chunked_hash(b"".join(parts), chunk, algo).hex
