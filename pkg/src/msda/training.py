"""Episodic multi-task training engine and the model-variant zoo.

Each batch holds examples from a single source domain; that domain acts as
the episode's meta-target while the remaining domains are meta-sources. The
mixture models combine a meta-source mixing loss with strong supervision of
the meta-target expert; adversarial variants add a gradient-reversed domain
loss, weighted by gamma, on the shared encoder.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .adversarial import DomainAdvBranch, domain_adv_loss
from .checkpoint import load_encoder, load_params, save_encoder, save_params
from .config import RunConfig, TrainConfig, parse_variant
from .data import DatasetBundle, Example, atomic_write_text, train_val_split
from .encoders import TextEncoder, build_encoder
from .evaluation import METRICS, threshold_predict
from .mixing import (
    GLOBAL,
    AttentionParams,
    ExpertBank,
    MixWeights,
    MixingError,
    attention_weights_batch,
    finetune_average_search,
)
from .seeding import stable_rng, stable_seed

PROB_EPS = 1e-7

TARGET_DOMAIN_KEY = "<target>"


class TrainingError(ValueError):
    """Invalid training configuration or episode."""


@dataclass(frozen=True)
class Episode:
    """One single-domain batch with its meta-target/meta-source designation."""

    meta_target: str
    batch: tuple[Example, ...]
    meta_sources: tuple[str, ...]

    def __post_init__(self):
        if not self.batch:
            raise TrainingError("empty episode batch")
        for ex in self.batch:
            if ex.domain != self.meta_target:
                raise TrainingError(
                    f"episode batch mixes domains: {ex.domain!r} vs {self.meta_target!r}"
                )

    @property
    def texts(self) -> list[str]:
        return [ex.text for ex in self.batch]

    def labels(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([float(ex.label) for ex in self.batch], dtype=dtype)


def schedule(bundle: DatasetBundle, batch_size: int, seed: int, epoch: int) -> list[Episode]:
    """Seeded epoch schedule: single-domain batches, interleaved across domains.

    Every source example appears exactly once; each batch's own domain is its
    meta-target. A domain smaller than one batch still yields its short batch.
    """
    if batch_size < 1:
        raise TrainingError(f"batch_size must be >= 1, got {batch_size}")
    domains = bundle.domains
    episodes: list[Episode] = []
    for domain in domains:
        examples = list(bundle.sources[domain])
        stable_rng("schedule", seed, epoch, domain).shuffle(examples)
        meta_sources = tuple(d for d in domains if d != domain)
        for i in range(0, len(examples), batch_size):
            episodes.append(Episode(domain, tuple(examples[i : i + batch_size]), meta_sources))
    stable_rng("episode-order", seed, epoch).shuffle(episodes)
    return episodes


def binary_cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Two-sided cross-entropy on sigmoid outputs, clamped to [eps, 1-eps]."""
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def _episode_member_probs(
    bank: ExpertBank,
    texts: Sequence[str],
    member_domains: Sequence[str],
    mixer: str,
    attention: AttentionParams | None,
    include_global: bool,
    scale_attention: bool,
) -> torch.Tensor:
    """Mixed probability per example over the given expert subset (+ global)."""
    if mixer not in ("averaging", "attention"):
        raise TrainingError(f"unknown mixer {mixer!r}; use 'averaging' or 'attention'")
    if mixer == "attention" and attention is None:
        raise TrainingError("attention mixer needs AttentionParams")
    if not member_domains and not include_global:
        raise MixingError("no members left to mix over")
    expert_encs = [bank.expert_for(d).encode_batch(texts) for d in member_domains]
    shared_enc = bank.shared.encode_batch(texts)
    prob_cols = [enc.probs for enc in expert_encs]
    pooled_cols = [enc.pooled for enc in expert_encs]
    if include_global:
        prob_cols.append(shared_enc.probs)
        pooled_cols.append(shared_enc.pooled)
    probs = torch.stack(prob_cols, dim=1)  # (B, M)
    if mixer == "averaging":
        return probs.mean(dim=1)
    member_pooled = torch.stack(pooled_cols, dim=1)  # (B, M, d)
    weights = attention_weights_batch(attention, shared_enc.pooled, member_pooled, scale_attention)
    return (probs * weights).sum(dim=1)


def meta_source_loss(
    bank: ExpertBank,
    mixer: str,
    episode: Episode,
    attention: AttentionParams | None = None,
    include_global: bool = True,
    scale_attention: bool = False,
) -> torch.Tensor:
    """Cross-entropy of the mixed prediction restricted to the meta-sources.

    The meta-target expert is excluded from the member set before any
    softmax, so its parameters receive no gradient from this loss.
    """
    mixed = _episode_member_probs(
        bank, episode.texts, episode.meta_sources, mixer, attention, include_global, scale_attention
    )
    return binary_cross_entropy(mixed, episode.labels(mixed.dtype))


def meta_target_loss(bank: ExpertBank, episode: Episode) -> torch.Tensor:
    """Strong supervision of the meta-target's own expert, and only it."""
    expert = bank.expert_for(episode.meta_target)
    probs = expert.encode_batch(episode.texts).probs
    return binary_cross_entropy(probs, episode.labels(probs.dtype))


def total_loss(loss_s, loss_t, loss_d, lam: float, gamma: float) -> torch.Tensor:
    """Combined objective: lam * L_s + (1 - lam) * L_t + gamma * L_D."""
    ls = torch.as_tensor(loss_s, dtype=torch.float32) if not torch.is_tensor(loss_s) else loss_s
    lt = torch.as_tensor(loss_t, dtype=ls.dtype) if not torch.is_tensor(loss_t) else loss_t
    ld = torch.as_tensor(loss_d, dtype=ls.dtype) if not torch.is_tensor(loss_d) else loss_d
    return lam * ls + (1.0 - lam) * lt + gamma * ld


def build_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    """Decoupled weight decay over the trainable parameters."""
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def build_scheduler(optimizer, warmup_steps: int):
    """Linear warmup to the configured rate, then constant."""

    def factor(step: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, (step + 1) / warmup_steps)

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


class _TargetPool:
    """Cycles through the unlabelled target texts in a seeded epoch order."""

    def __init__(self, texts: Sequence[str], seed: int, epoch: int):
        order = list(texts)
        stable_rng("target-pool", seed, epoch).shuffle(order)
        self._order = order
        self._pos = 0

    def take(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if self._pos >= len(self._order):
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return out


def _adversarial_episode_loss(
    branch: DomainAdvBranch,
    encoder: TextEncoder,
    source_layer_rep: torch.Tensor,
    source_domain_idx: int,
    pool: _TargetPool | None,
    target_idx: int | None,
    batch_size: int,
) -> torch.Tensor:
    """Domain cross-entropy of a task batch plus an interleaved target batch."""
    reps = [source_layer_rep]
    targets = [torch.full((source_layer_rep.shape[0],), source_domain_idx, dtype=torch.long)]
    if pool is not None and target_idx is not None:
        target_texts = pool.take(batch_size)
        reps.append(encoder.layer_pooled(target_texts, branch.attach_layer))
        targets.append(torch.full((len(target_texts),), target_idx, dtype=torch.long))
    return domain_adv_loss(branch, torch.cat(reps), torch.cat(targets))


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _predict_probs_single(model: TextEncoder, texts: Sequence[str], batch_size: int = 64) -> list[float]:
    probs: list[float] = []
    with torch.no_grad():
        for chunk in _chunks(list(texts), batch_size):
            probs.extend(model.encode_batch(chunk).probs.tolist())
    return probs


def _score(probs: Sequence[float], labels: Sequence[int], metric: str) -> float:
    preds = [threshold_predict(p) for p in probs]
    return METRICS[metric](preds, labels)


def _snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _build_bank(domains: Sequence[str], rc: RunConfig, seed: int) -> ExpertBank:
    experts = []
    for domain in domains:
        cfg = dataclasses.replace(rc.encoder, seed=stable_seed("encoder-init", seed, "expert", domain))
        experts.append(build_encoder(cfg))
    shared_cfg = dataclasses.replace(rc.encoder, seed=stable_seed("encoder-init", seed, "global"))
    return ExpertBank(tuple(domains), experts, build_encoder(shared_cfg))


@dataclass
class TrainedModel:
    """A trained variant plus everything its inference path needs."""

    variant: str
    run_config: RunConfig
    single: TextEncoder | None = None
    bank: ExpertBank | None = None
    attention: AttentionParams | None = None
    static_weights: MixWeights | None = None
    domain_classifier: tuple[torch.Tensor, torch.Tensor] | None = None
    branch: DomainAdvBranch | None = None

    @property
    def family(self) -> str:
        return parse_variant(self.variant)[0]

    @property
    def representation_encoder(self) -> TextEncoder:
        """The encoder whose representations the analyses look at."""
        return self.single if self.single is not None else self.bank.shared

    def predict_proba(self, texts: Sequence[str], batch_size: int = 64) -> list[float]:
        family = self.family
        if self.single is not None:
            return _predict_probs_single(self.single, texts, batch_size)
        assert self.bank is not None
        scale = self.run_config.mixing.scale_attention
        out: list[float] = []
        with torch.no_grad():
            for chunk in _chunks(list(texts), batch_size):
                expert_encs = [e.encode_batch(chunk) for e in self.bank.experts]
                probs = torch.stack([enc.probs for enc in expert_encs], dim=1)  # (B, K)
                if family == "moe-dc":
                    weight, bias = self.domain_classifier
                    pooled_g = self.bank.shared.encode_batch(chunk).pooled
                    logits = pooled_g @ weight + bias
                    weights = torch.softmax(logits, dim=1)
                    mixed = (probs * weights).sum(dim=1)
                elif family in ("moe-att", "moe-att-adv"):
                    shared_enc = self.bank.shared.encode_batch(chunk)
                    member_pooled = torch.stack(
                        [enc.pooled for enc in expert_encs] + [shared_enc.pooled], dim=1
                    )
                    weights = attention_weights_batch(
                        self.attention, shared_enc.pooled, member_pooled, scale
                    )
                    all_probs = torch.cat([probs, shared_enc.probs.unsqueeze(1)], dim=1)
                    mixed = (all_probs * weights).sum(dim=1)
                elif family == "independent-ft":
                    shared_probs = self.bank.shared.encode_batch(chunk).probs
                    all_probs = torch.cat([probs, shared_probs.unsqueeze(1)], dim=1)
                    w = self.static_weights.weights.to(all_probs.dtype)
                    mixed = all_probs @ w
                else:  # independent-avg / moe-avg: plain averaging with global
                    shared_probs = self.bank.shared.encode_batch(chunk).probs
                    all_probs = torch.cat([probs, shared_probs.unsqueeze(1)], dim=1)
                    mixed = all_probs.mean(dim=1)
                out.extend(mixed.tolist())
        return out

    def expert_predictions(self, texts: Sequence[str], batch_size: int = 64) -> list[list[int]]:
        """Per-expert thresholded predictions (for agreement analysis)."""
        if self.bank is None:
            raise TrainingError(f"variant {self.variant!r} has no expert bank")
        matrix = self.bank.member_probs(list(texts), batch_size)[: self.bank.num_experts]
        return [[threshold_predict(p) for p in row.tolist()] for row in matrix]

    def representations(self, texts: Sequence[str], layer_index: int | None = None, batch_size: int = 64):
        """Pooled representations (n, d) at a layer (default: final)."""
        encoder = self.representation_encoder
        layer = layer_index if layer_index is not None else encoder.config.num_layers
        chunks = []
        with torch.no_grad():
            for chunk in _chunks(list(texts), batch_size):
                chunks.append(encoder.layer_pooled(chunk, layer))
        return torch.cat(chunks).numpy()

    def mixing_weights_dict(self) -> dict | None:
        if self.static_weights is None:
            return None
        return self.static_weights.to_dict()

    def save(self, run_dir: str | Path) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        meta = {"variant": self.variant, "domains": None}
        if self.single is not None:
            save_encoder(self.single, run_dir / "encoder_global.bin")
        else:
            meta["domains"] = list(self.bank.domains)
            save_encoder(self.bank.shared, run_dir / "encoder_global.bin")
            for domain, expert in zip(self.bank.domains, self.bank.experts):
                save_encoder(expert, run_dir / f"encoder_expert_{domain}.bin")
        if self.attention is not None:
            save_params(
                {"query": self.attention.query, "key": self.attention.key},
                run_dir / "mixing_attention.bin",
                extra={"dim": self.attention.dim},
            )
        if self.domain_classifier is not None:
            weight, bias = self.domain_classifier
            save_params(
                {"weight": weight, "bias": bias}, run_dir / "mixing_domain_classifier.bin"
            )
        if self.static_weights is not None:
            atomic_write_text(
                run_dir / "mixing_static_weights.json",
                json.dumps(
                    {
                        "members": [str(m) for m in self.static_weights.members],
                        "weights": [float(w) for w in self.static_weights.weights],
                    },
                    indent=2,
                )
                + "\n",
            )
        if self.branch is not None:
            save_params(
                {
                    "classifier.weight": self.branch.classifier.weight,
                    "classifier.bias": self.branch.classifier.bias,
                },
                run_dir / "adversarial_branch.bin",
                extra={
                    "attach_layer": self.branch.attach_layer,
                    "num_domains": self.branch.num_domains,
                },
            )
        atomic_write_text(run_dir / "model.json", json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, run_dir: str | Path, run_config: RunConfig) -> "TrainedModel":
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "model.json").read_text(encoding="utf-8"))
        variant = meta["variant"]
        family = parse_variant(variant)[0]
        model = cls(variant=variant, run_config=run_config)
        if meta["domains"] is None:
            model.single = load_encoder(run_dir / "encoder_global.bin")
        else:
            domains = tuple(meta["domains"])
            experts = [load_encoder(run_dir / f"encoder_expert_{d}.bin") for d in domains]
            shared = load_encoder(run_dir / "encoder_global.bin")
            model.bank = ExpertBank(domains, experts, shared)
            model.bank.trained = True
        att_path = run_dir / "mixing_attention.bin"
        if att_path.exists():
            tensors, extra = load_params(att_path)
            attention = AttentionParams(int(extra["dim"]))
            with torch.no_grad():
                attention.query.copy_(tensors["query"])
                attention.key.copy_(tensors["key"])
            model.attention = attention
        dc_path = run_dir / "mixing_domain_classifier.bin"
        if dc_path.exists():
            tensors, _ = load_params(dc_path)
            model.domain_classifier = (tensors["weight"], tensors["bias"])
        sw_path = run_dir / "mixing_static_weights.json"
        if sw_path.exists():
            obj = json.loads(sw_path.read_text(encoding="utf-8"))
            members = tuple(GLOBAL if m == GLOBAL else int(m) for m in obj["members"])
            model.static_weights = MixWeights(torch.tensor(obj["weights"], dtype=torch.float64), members)
        br_path = run_dir / "adversarial_branch.bin"
        if br_path.exists():
            tensors, extra = load_params(br_path)
            branch = DomainAdvBranch(
                dim=tensors["classifier.weight"].shape[1],
                num_domains=int(extra["num_domains"]),
                attach_layer=int(extra["attach_layer"]),
            )
            with torch.no_grad():
                branch.classifier.weight.copy_(tensors["classifier.weight"])
                branch.classifier.bias.copy_(tensors["classifier.bias"])
            model.branch = branch
        if family in ("moe-att", "moe-att-adv") and model.attention is None:
            raise TrainingError(f"{run_dir}: missing attention parameters for {variant}")
        if family == "moe-dc" and model.domain_classifier is None:
            raise TrainingError(f"{run_dir}: missing domain classifier for {variant}")
        if family == "independent-ft" and model.static_weights is None:
            raise TrainingError(f"{run_dir}: missing static weights for {variant}")
        return model


def _domain_label_spaces(bundle: DatasetBundle, mode: str) -> tuple[dict[str, int], int, int | None]:
    """Domain-label indices for the adversarial branch.

    Transductive mode reserves one extra index for the unlabelled target.
    """
    index = bundle.domain_index()
    if mode == "sources":
        return index, len(index), None
    return index, len(index) + 1, len(index)


def _log_episode(history, cfg, counter: int, episode: Episode, losses: dict) -> None:
    if cfg.log_every and counter % cfg.log_every == 0:
        history.append({"kind": "episode", "i": counter, "domain": episode.meta_target, **losses})


def _fit_single_model(
    model: TextEncoder,
    train_bundle: DatasetBundle,
    val_examples: Sequence[Example],
    rc: RunConfig,
    seed: int,
    history: list,
    member: str,
    branch: DomainAdvBranch | None = None,
    target_texts: Sequence[str] = (),
    domain_index: dict[str, int] | None = None,
    target_idx: int | None = None,
) -> None:
    """Plain supervised training of one encoder, optionally adversarial."""
    cfg = rc.train
    params = list(model.parameters()) + (list(branch.parameters()) if branch else [])
    optimizer = build_optimizer(params, cfg)
    scheduler = build_scheduler(optimizer, cfg.warmup_steps)
    val_texts = [ex.text for ex in val_examples]
    val_labels = [ex.label for ex in val_examples]
    best_metric = -1.0
    best_state = None
    counter = 0
    for epoch in range(cfg.epochs):
        episodes = schedule(train_bundle, cfg.batch_size, seed, epoch)
        pool = (
            _TargetPool(target_texts, seed, epoch)
            if branch is not None and target_idx is not None and target_texts
            else None
        )
        task_sum = 0.0
        dom_sum = 0.0
        for group in _chunks(episodes, cfg.grad_accumulation):
            optimizer.zero_grad()
            for episode in group:
                enc = model.encode_batch(episode.texts)
                task = binary_cross_entropy(enc.probs, episode.labels(enc.probs.dtype))
                if branch is not None:
                    ld = _adversarial_episode_loss(
                        branch,
                        model,
                        enc.layer_pooled[branch.attach_layer - 1],
                        domain_index[episode.meta_target],
                        pool,
                        target_idx,
                        len(episode.batch),
                    )
                    loss = task + cfg.gamma * ld
                    dom_sum += ld.item()
                else:
                    loss = task
                task_sum += task.item()
                (loss / len(group)).backward()
                counter += 1
                _log_episode(history, cfg, counter, episode, {"member": member, "loss": task.item()})
            optimizer.step()
            scheduler.step()
        val_metric = _score(_predict_probs_single(model, val_texts), val_labels, cfg.selection_metric)
        history.append(
            {
                "kind": "epoch",
                "member": member,
                "epoch": epoch,
                "loss": task_sum / max(len(episodes), 1),
                "loss_d": dom_sum / max(len(episodes), 1),
                "val_metric": val_metric,
            }
        )
        if val_metric > best_metric:
            best_metric = val_metric
            best_state = _snapshot(model)
    if best_state is not None:
        model.load_state_dict(best_state)


def _train_single(variant: str, bundle: DatasetBundle, rc: RunConfig, seed: int, history: list) -> TrainedModel:
    train_bundle, val = train_val_split(bundle, rc.train.val_fraction, seed)
    cfg = dataclasses.replace(rc.encoder, seed=stable_seed("encoder-init", seed, "global"))
    model = build_encoder(cfg)
    branch = None
    domain_index = None
    target_idx = None
    if rc.family == "adv" and rc.train.gamma > 0:
        domain_index, num_domains, target_idx = _domain_label_spaces(
            bundle, rc.adversarial.domain_label_mode
        )
        branch = DomainAdvBranch(
            rc.encoder.dim, num_domains, rc.attach_layer, seed=stable_seed("branch", seed)
        )
    _fit_single_model(
        model,
        train_bundle,
        val,
        rc,
        seed,
        history,
        member="global",
        branch=branch,
        target_texts=[ex.text for ex in bundle.target_unlabelled],
        domain_index=domain_index,
        target_idx=target_idx,
    )
    return TrainedModel(variant=variant, run_config=rc, single=model, branch=branch)


def _train_episodic(variant: str, bundle: DatasetBundle, rc: RunConfig, seed: int, history: list) -> TrainedModel:
    cfg = rc.train
    family = rc.family
    train_bundle, val = train_val_split(bundle, cfg.val_fraction, seed)
    domains = bundle.domains
    if len(domains) < 2:
        raise TrainingError(f"{variant} needs at least 2 source domains")
    bank = _build_bank(domains, rc, seed)
    mixer = "averaging" if family == "moe-avg" else "attention"
    attention = (
        AttentionParams(rc.encoder.dim, seed=stable_seed("attention", seed))
        if mixer == "attention"
        else None
    )
    branch = None
    domain_index = None
    target_idx = None
    if family == "moe-att-adv" and cfg.gamma > 0:
        domain_index, num_domains, target_idx = _domain_label_spaces(
            bundle, rc.adversarial.domain_label_mode
        )
        branch = DomainAdvBranch(
            rc.encoder.dim, num_domains, rc.attach_layer, seed=stable_seed("branch", seed)
        )
    container = nn.ModuleDict({"bank": bank})
    if attention is not None:
        container["attention"] = attention
    if branch is not None:
        container["branch"] = branch
    optimizer = build_optimizer(container.parameters(), cfg)
    scheduler = build_scheduler(optimizer, cfg.warmup_steps)
    include_global = rc.mixing.include_global_in_meta_source
    scale = rc.mixing.scale_attention
    target_texts = [ex.text for ex in bundle.target_unlabelled]
    val_texts = [ex.text for ex in val]
    val_labels = [ex.label for ex in val]
    trained = TrainedModel(variant=variant, run_config=rc, bank=bank, attention=attention, branch=branch)
    best_metric = -1.0
    best_state = None
    counter = 0
    for epoch in range(cfg.epochs):
        episodes = schedule(train_bundle, cfg.batch_size, seed, epoch)
        pool = (
            _TargetPool(target_texts, seed, epoch)
            if branch is not None and target_idx is not None and target_texts
            else None
        )
        s_sum = t_sum = d_sum = total_sum = 0.0
        for group in _chunks(episodes, cfg.grad_accumulation):
            optimizer.zero_grad()
            for episode in group:
                loss_s = meta_source_loss(bank, mixer, episode, attention, include_global, scale)
                loss_t = meta_target_loss(bank, episode)
                if branch is not None:
                    reps = bank.shared.layer_pooled(episode.texts, branch.attach_layer)
                    loss_d = _adversarial_episode_loss(
                        branch,
                        bank.shared,
                        reps,
                        domain_index[episode.meta_target],
                        pool,
                        target_idx,
                        len(episode.batch),
                    )
                else:
                    loss_d = torch.zeros(())
                loss = total_loss(loss_s, loss_t, loss_d, cfg.lam, cfg.gamma)
                (loss / len(group)).backward()
                s_sum += loss_s.item()
                t_sum += loss_t.item()
                d_sum += loss_d.item()
                total_sum += loss.item()
                counter += 1
                _log_episode(
                    history,
                    cfg,
                    counter,
                    episode,
                    {"loss_s": loss_s.item(), "loss_t": loss_t.item(), "loss_d": loss_d.item()},
                )
            optimizer.step()
            scheduler.step()
        n = max(len(episodes), 1)
        val_metric = _score(trained.predict_proba(val_texts), val_labels, cfg.selection_metric)
        history.append(
            {
                "kind": "epoch",
                "epoch": epoch,
                "loss_s": s_sum / n,
                "loss_t": t_sum / n,
                "loss_d": d_sum / n,
                "loss": total_sum / n,
                "val_metric": val_metric,
            }
        )
        if val_metric > best_metric:
            best_metric = val_metric
            best_state = _snapshot(container)
    if best_state is not None:
        container.load_state_dict(best_state)
    bank.trained = True
    return trained


def _single_domain_bundle(bundle: DatasetBundle, domain: str) -> DatasetBundle:
    return DatasetBundle(sources={domain: bundle.sources[domain]})


def _train_independent(variant: str, bundle: DatasetBundle, rc: RunConfig, seed: int, history: list) -> TrainedModel:
    cfg = rc.train
    train_bundle, val = train_val_split(bundle, cfg.val_fraction, seed)
    domains = bundle.domains
    if len(domains) < 2:
        raise TrainingError(f"{variant} needs at least 2 source domains")
    bank = _build_bank(domains, rc, seed)
    for domain in domains:
        expert_val = [ex for ex in val if ex.domain == domain]
        _fit_single_model(
            bank.expert_for(domain),
            _single_domain_bundle(train_bundle, domain),
            expert_val or val,
            rc,
            stable_seed("independent", seed, domain),
            history,
            member=domain,
        )
    _fit_single_model(
        bank.shared,
        train_bundle,
        val,
        rc,
        stable_seed("independent", seed, "global"),
        history,
        member="global",
    )
    bank.trained = True
    trained = TrainedModel(variant=variant, run_config=rc, bank=bank)
    if rc.family == "independent-ft":
        metric = METRICS[cfg.selection_metric]
        trained.static_weights = finetune_average_search(
            bank, val, rc.mixing.finetune_trials, seed, metric
        )
    return trained


def _pretrain_domain_classifier(
    bank: ExpertBank, train_bundle: DatasetBundle, rc: RunConfig, seed: int, history: list
) -> tuple[torch.Tensor, torch.Tensor]:
    """Train the static domain classifier on the frozen shared encoder."""
    cfg = rc.train
    domain_index = train_bundle.domain_index()
    classifier = nn.Linear(bank.dim, len(domain_index))
    gen = torch.Generator().manual_seed(stable_seed("domain-classifier", seed))
    with torch.no_grad():
        classifier.weight.uniform_(-1.0 / bank.dim**0.5, 1.0 / bank.dim**0.5, generator=gen)
        classifier.bias.zero_()
    optimizer = build_optimizer(classifier.parameters(), cfg)
    scheduler = build_scheduler(optimizer, cfg.warmup_steps)
    for epoch in range(cfg.epochs):
        episodes = schedule(train_bundle, cfg.batch_size, seed, epoch)
        loss_sum = 0.0
        correct = 0
        seen = 0
        for group in _chunks(episodes, cfg.grad_accumulation):
            optimizer.zero_grad()
            for episode in group:
                with torch.no_grad():
                    pooled = bank.shared.encode_batch(episode.texts).pooled
                logits = classifier(pooled)
                targets = torch.full((len(episode.batch),), domain_index[episode.meta_target], dtype=torch.long)
                loss = nn.functional.cross_entropy(logits, targets)
                (loss / len(group)).backward()
                loss_sum += loss.item()
                correct += int((logits.argmax(dim=1) == targets).sum())
                seen += len(episode.batch)
            optimizer.step()
            scheduler.step()
        history.append(
            {
                "kind": "epoch",
                "member": "domain-classifier",
                "epoch": epoch,
                "loss": loss_sum / max(len(episodes), 1),
                "val_metric": correct / max(seen, 1),
            }
        )
    # Stored as (d, K) so weights come out of `pooled @ weight + bias`.
    return classifier.weight.detach().T.contiguous(), classifier.bias.detach().clone()


def _train_moe_dc(variant: str, bundle: DatasetBundle, rc: RunConfig, seed: int, history: list) -> TrainedModel:
    cfg = rc.train
    train_bundle, val = train_val_split(bundle, cfg.val_fraction, seed)
    domains = bundle.domains
    if len(domains) < 2:
        raise TrainingError(f"{variant} needs at least 2 source domains")
    bank = _build_bank(domains, rc, seed)
    # The domain classifier comes first and is held static; it reads the
    # shared encoder in its frozen, freshly initialized state, and that
    # encoder stays frozen so inference sees the same representations.
    dc = _pretrain_domain_classifier(bank, train_bundle, rc, seed, history)
    for domain in domains:
        expert_val = [ex for ex in val if ex.domain == domain]
        _fit_single_model(
            bank.expert_for(domain),
            _single_domain_bundle(train_bundle, domain),
            expert_val or val,
            rc,
            stable_seed("independent", seed, domain),
            history,
            member=domain,
        )
    bank.trained = True
    return TrainedModel(variant=variant, run_config=rc, bank=bank, domain_classifier=dc)


def train(
    variant: str, bundle: DatasetBundle, run_config: RunConfig, seed: int | None = None
) -> tuple[TrainedModel, list[dict]]:
    """Train one model variant on a bundle; returns the model and history.

    Held-out labels are firewalled: any ``target_test`` split is dropped on
    entry, before anything else looks at the bundle. ``seed`` overrides the
    config seed (the leave-one-out harness sweeps it).
    """
    bundle = bundle.training_view()
    rc = dataclasses.replace(run_config, variant=variant)
    rc.validate_layers()
    family = rc.family
    effective_seed = rc.train.seed if seed is None else seed
    history: list[dict] = []
    if family in ("basic", "adv"):
        trained = _train_single(variant, bundle, rc, effective_seed, history)
    elif family in ("moe-avg", "moe-att", "moe-att-adv"):
        trained = _train_episodic(variant, bundle, rc, effective_seed, history)
    elif family in ("independent-avg", "independent-ft"):
        trained = _train_independent(variant, bundle, rc, effective_seed, history)
    elif family == "moe-dc":
        trained = _train_moe_dc(variant, bundle, rc, effective_seed, history)
    else:  # pragma: no cover - parse_variant already rejects unknown names
        raise TrainingError(f"unhandled variant family {family!r}")
    return trained, history


def save_run(run_dir: str | Path, rc: RunConfig, trained: TrainedModel, history: Sequence[dict]) -> Path:
    """Write a reproducible run directory: config, model blobs, history."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / "config.json", json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")
    trained.save(run_dir)
    lines = [json.dumps(rec, sort_keys=True) for rec in history]
    atomic_write_text(run_dir / "history.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    return run_dir


def load_run(run_dir: str | Path) -> tuple[TrainedModel, RunConfig]:
    from .config import run_config_from_dict

    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise TrainingError(f"not a run directory (missing config.json): {run_dir}")
    rc = run_config_from_dict(json.loads(cfg_path.read_text(encoding="utf-8")))
    return TrainedModel.load(run_dir, rc), rc
