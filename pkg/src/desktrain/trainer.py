"""Training session: data, model, optimizer and telemetry in lockstep.

Data parallelism is simulated sequentially: each of the `dp_degree` ranks
owns a corpus shard and a loader state, computes loss and gradients on its
own batch, and the per-rank gradients are combined with the deterministic
`all_reduce_mean` before one shared optimizer step. Because ranks run in a
fixed order inside one process, a run is a pure function of its config and
corpus.

Step recipe:

    1. per rank: pack a batch, shift it into (inputs, targets), backward
    2. all-reduce gradient mean (rounded once per entry in bf16 modes)
    3. global-norm clip (the logged grad_norm is the pre-clip value)
    4. AdamW in float64 at the scheduled learning rate
    5. in bf16 modes, round updated parameters back to the grid

Initial parameters are rounded with deterministic nearest-even in both
bf16 modes, so an RNE run and an SR run branch from identical weights and
differ only in rounding decisions.

`snapshot` / `restore` capture and reinstate the complete session state
(parameters, moments, loader states, SR stream position, step counter) so
that a restored session replays the exact step sequence; metric records
after the restored step are discarded, matching a log rewound on recovery.
"""

from __future__ import annotations

import os

import numpy as np

from .bf16 import RNE, SRStream, round_bf16_array
from .checkpoint import CheckpointBundle, save_checkpoint
from .config import TrainConfig
from .data import ByteTokenizer, Corpus, LoaderState, SequencePrefetcher, next_batch
from .model import init_params, loss_and_backward, make_context
from .monitor import MetricsLog, MetricsRecord, global_l2
from .optim import OptimState, adamw_step, clip_global_norm, lr_at
from .simulate import all_reduce_mean


class TrainSession:
    def __init__(self, config: TrainConfig, corpus: Corpus):
        self.config = config
        self.corpus = corpus
        self.tokenizer = ByteTokenizer()
        if config.model.vocab_size < self.tokenizer.vocab_size:
            raise ValueError(
                f"model vocab_size {config.model.vocab_size} smaller than "
                f"tokenizer vocab {self.tokenizer.vocab_size}"
            )
        self.ctx = make_context(config.numerics.mode, config.numerics.sr_seed)
        self.params = init_params(config.model, config.init_seed)
        if self.ctx.rounding is not None:
            self.params = {k: _rne_quantize(v) for k, v in self.params.items()}
        self.opt_state = OptimState.zeros_like(self.params)
        dc = config.data
        self.loader_states = [
            LoaderState.initial(dc.seed, dc.dp_degree, rank) for rank in range(dc.dp_degree)
        ]
        self._skip_decay = (
            frozenset()
            if config.optim.decay_norm_weights
            else frozenset(k for k in self.params if k.endswith("norm"))
        )
        self.step = 0
        self.tokens_seen = 0
        self.records: list[MetricsRecord] = []
        self._prefetchers: list[SequencePrefetcher] | None = None
        if dc.prefetch_depth > 0:
            self._prefetchers = self._make_prefetchers()

    def _make_prefetchers(self) -> list[SequencePrefetcher]:
        dc = self.config.data
        return [
            SequencePrefetcher(
                self.corpus,
                self.tokenizer,
                state,
                self.config.model.max_seq_len,
                depth=dc.prefetch_depth,
                max_epochs=dc.max_epochs,
            )
            for state in self.loader_states
        ]

    def _next_batch(self, rank: int):
        dc = self.config.data
        if self._prefetchers is None:
            batch, new_state = next_batch(
                self.loader_states[rank],
                self.corpus,
                self.tokenizer,
                self.config.model.max_seq_len,
                dc.batch_size_per_rank,
                dc.max_epochs,
            )
        else:
            rows = []
            for _ in range(dc.batch_size_per_rank):
                seq, _ = self._prefetchers[rank].next()
                rows.append(seq)
            batch = np.stack(rows)
            new_state = self._prefetchers[rank].state
        self.loader_states[rank] = new_state
        return batch

    def run_step(self) -> MetricsRecord:
        cfg = self.config
        step = self.step + 1
        losses = []
        rank_grads = []
        for rank in range(cfg.data.dp_degree):
            batch = self._next_batch(rank)
            inputs, targets = batch[:, :-1], batch[:, 1:]
            loss, grads = loss_and_backward(self.params, cfg.model, inputs, targets, self.ctx)
            losses.append(loss)
            rank_grads.append(grads)
        loss = sum(losses) / len(losses)
        grads = all_reduce_mean(rank_grads, self.ctx.rounding)
        clipped, grad_norm = clip_global_norm(grads, cfg.optim.clip_norm)
        lr = lr_at(step, cfg.optim)
        self.params, self.opt_state = adamw_step(
            self.params, clipped, self.opt_state, cfg.optim, lr, self._skip_decay
        )
        if self.ctx.rounding is not None:
            self.params = {k: self.ctx.quantize(v) for k, v in self.params.items()}
        self.step = step
        self.tokens_seen += cfg.data.dp_degree * cfg.data.batch_size_per_rank * cfg.model.max_seq_len
        record = MetricsRecord(
            step=step,
            tokens_seen=self.tokens_seen,
            loss=loss,
            grad_norm=grad_norm,
            param_norm=global_l2(self.params),
            lr=lr,
        )
        self.records.append(record)
        return record

    def snapshot(self) -> CheckpointBundle:
        sr_state = None
        if isinstance(self.ctx.rounding, SRStream):
            sr_state = self.ctx.rounding.state()
        return CheckpointBundle(
            step=self.step,
            params={k: v.copy() for k, v in self.params.items()},
            optim=OptimState(
                m={k: v.copy() for k, v in self.opt_state.m.items()},
                v={k: v.copy() for k, v in self.opt_state.v.items()},
                t=self.opt_state.t,
            ),
            loader_states=tuple(self.loader_states),
            numeric_mode=self.config.numerics.mode,
            sr_state=sr_state,
        )

    def restore(self, bundle: CheckpointBundle) -> None:
        cfg = self.config
        if bundle.numeric_mode != cfg.numerics.mode:
            raise ValueError(
                f"checkpoint numeric mode {bundle.numeric_mode!r} does not match "
                f"configured mode {cfg.numerics.mode!r}"
            )
        if set(bundle.params) != set(self.params):
            raise ValueError("checkpoint parameter names do not match the model")
        if len(bundle.loader_states) != cfg.data.dp_degree:
            raise ValueError(
                f"checkpoint has {len(bundle.loader_states)} loader states, "
                f"expected {cfg.data.dp_degree}"
            )
        # Rebuild dicts in the session's existing key order: the codec
        # returns sorted names, and norm reductions over the dicts must see
        # the same order before and after a restore to replay bit-exactly.
        order = list(self.params)
        self.params = {k: bundle.params[k].copy() for k in order}
        self.opt_state = OptimState(
            m={k: bundle.optim.m[k].copy() for k in order},
            v={k: bundle.optim.v[k].copy() for k in order},
            t=bundle.optim.t,
        )
        self.loader_states = list(bundle.loader_states)
        if isinstance(self.ctx.rounding, SRStream):
            if bundle.sr_state is None:
                raise ValueError("checkpoint lacks the SR stream state required by this mode")
            self.ctx.rounding.set_state(bundle.sr_state)
        self.step = bundle.step
        self.tokens_seen = (
            bundle.step * cfg.data.dp_degree * cfg.data.batch_size_per_rank * cfg.model.max_seq_len
        )
        self.records = [r for r in self.records if r.step <= bundle.step]
        if self._prefetchers is not None:
            for pf in self._prefetchers:
                pf.close()
            self._prefetchers = self._make_prefetchers()

    def run(
        self,
        n_steps: int | None = None,
        metrics_log: MetricsLog | None = None,
        checkpoint_dir: str | None = None,
        checkpoint_interval: int | None = None,
        echo=None,
    ) -> None:
        """Train until the step counter reaches `n_steps` (default: the
        configured total), logging and checkpointing along the way."""
        target = self.config.optim.total_steps if n_steps is None else n_steps
        interval = checkpoint_interval or self.config.checkpoint_interval
        while self.step < target:
            record = self.run_step()
            if metrics_log is not None:
                metrics_log.record_step(record)
            if checkpoint_dir is not None and self.step % interval == 0:
                path = os.path.join(checkpoint_dir, f"step_{self.step:06d}.bin")
                save_checkpoint(self.snapshot(), path)
            if echo is not None:
                echo(record)

    def close(self) -> None:
        if self._prefetchers is not None:
            for pf in self._prefetchers:
                pf.close()
            self._prefetchers = None


def _rne_quantize(x):
    return round_bf16_array(x, RNE)


def build_session(config: TrainConfig) -> TrainSession:
    """Load the corpus named by the config and construct a session."""
    corpus = Corpus.from_jsonl(config.data.paths)
    return TrainSession(config, corpus)
