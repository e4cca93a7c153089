"""Training loop, schedules, evaluation and the entropy-threshold diagnostic."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .classifier import cross_entropy, entropy_loss, predict, row_entropy
from .contrastive import contrastive_loss, corruption_permutation
from .diffusion import build_diffusion
from .encoders import EncoderParams, embed, encode_global, encode_local, glorot, global_plan, sample_neighborhoods

log = logging.getLogger(__name__)

REPORT_HEADER = ["epoch", "iter", "L_CE", "L_CL", "L_EN", "overall", "lr", "lambda2"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.1
    lambda2_max: float = 0.1
    lambda2_mode: str = "scale"
    lambda3: float = 1.0
    eta0: float = 0.01
    epochs: int = 30
    iterations: int = 0
    batch_size: int = 128
    weight_decay: float = 5e-5
    temperature: float = 20.0
    sample_sizes: tuple = (20, 20)
    layer_dims: tuple = (1024, 64)
    alpha: float = 0.1
    topk: int = 20
    renormalize: bool = False
    n: int = 5
    seed: int = 0
    eval_batch: int = 512
    diag_gamma: float = -1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(s) for s in self.sample_sizes))
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))

    def validate(self) -> None:
        for name in ("lambda1", "lambda2_max", "lambda3", "eta0", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0 or self.iterations < 0 or self.n < 0:
            raise ConfigError("epochs, iterations and n must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.topk < 1 or any(s < 1 for s in self.sample_sizes):
            raise ConfigError("sample sizes and topk must be positive")
        if len(self.sample_sizes) != len(self.layer_dims):
            raise ConfigError("sample_sizes and layer_dims need one entry per layer")
        if self.lambda2_mode not in ("scale", "clamp"):
            raise ConfigError("lambda2_mode must be 'scale' or 'clamp'")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AblationFlags:
    disable_contrastive: bool = False
    disable_global_view: bool = False
    disable_local_view: bool = False
    disable_domain_adaptation: bool = False

    def __post_init__(self):
        if self.disable_global_view and self.disable_local_view:
            raise ConfigError("cannot drop both the local and the global view")
        if self.disable_global_view or self.disable_local_view:
            object.__setattr__(self, "disable_contrastive", True)

    @classmethod
    def parse(cls, names) -> "AblationFlags":
        table = {"cl": "disable_contrastive", "gv": "disable_global_view",
                 "lv": "disable_local_view", "da": "disable_domain_adaptation"}
        kwargs = {}
        for name in names:
            key = name.strip().lower()
            if key not in table:
                raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(table)}")
            kwargs[table[key]] = True
        return cls(**kwargs)

    def label(self) -> str:
        parts = [tag for tag, on in (("CL", self.disable_contrastive and not (self.disable_global_view or self.disable_local_view)),
                                      ("GV", self.disable_global_view), ("LV", self.disable_local_view),
                                      ("DA", self.disable_domain_adaptation)) if on]
        return "full" if not parts else "-" + "-".join(parts)


# ---------------------------------------------------------------- schedules

def lr_schedule(eta0: float, p: float) -> float:
    return eta0 * (1.0 + 10.0 * p) ** -0.75


def _ramp(p: float) -> float:
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def lambda2_schedule(lambda2_max: float, p: float, mode: str = "scale") -> float:
    if mode == "clamp":
        return min(_ramp(p), lambda2_max)
    return lambda2_max * _ramp(p)


# -------------------------------------------------------------------- model

@dataclass
class Model:
    encoder: EncoderParams
    w_b: ad.Tensor | None
    w_c: ad.Tensor
    temperature: float
    flags: AblationFlags = field(default_factory=AblationFlags)

    @classmethod
    def init(cls, in_dim, num_classes, config: TrainConfig, flags: AblationFlags, rng) -> "Model":
        use_local = not flags.disable_local_view
        use_global = not flags.disable_global_view
        enc = EncoderParams.init(in_dim, config.layer_dims, rng, local=use_local, global_=use_global)
        width = config.layer_dims[-1]
        emb_dim = width * (int(use_local) + int(use_global))
        w_b = ad.parameter(glorot(rng, width, width)) if not flags.disable_contrastive else None
        w_c = ad.parameter(glorot(rng, emb_dim, num_classes))
        return cls(enc, w_b, w_c, config.temperature, flags)

    def encoder_tensors(self) -> dict:
        out = self.encoder.tensors()
        if self.w_b is not None:
            out["disc"] = self.w_b
        return out

    def classifier_tensors(self) -> dict:
        return {"cls": self.w_c}

    def tensors(self) -> dict:
        return {**self.encoder_tensors(), **self.classifier_tensors()}

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.zero_grad()

    def state(self) -> dict:
        return {k: t.value.copy() for k, t in self.tensors().items()}

    def load_state(self, state: dict) -> None:
        tensors = self.tensors()
        if set(state) != set(tensors):
            raise ConfigError(f"checkpoint tensors {sorted(state)} do not match model {sorted(tensors)}")
        for k, t in tensors.items():
            if state[k].shape != t.shape:
                raise ConfigError(f"tensor {k}: shape {state[k].shape} != {t.shape}")
            t.value = np.array(state[k], dtype=t.value.dtype)

    def views(self, attributes, local_plan, diffusion, gplan):
        """Per-view embeddings ``(local, global)``; a dropped view is ``None``."""
        loc = glo = None
        if not self.flags.disable_local_view:
            loc = encode_local(attributes, local_plan, self.encoder)
        if not self.flags.disable_global_view:
            glo = encode_global(attributes, diffusion, gplan.batch, self.encoder, gplan)
        return loc, glo

    @staticmethod
    def join(loc, glo):
        if loc is None:
            return glo
        if glo is None:
            return loc
        return embed(loc, glo)


@dataclass
class Domain:
    graph: object
    diffusion: object

    @classmethod
    def build(cls, graph, config: TrainConfig, diffusion=None) -> "Domain":
        if diffusion is None:
            diffusion = build_diffusion(graph, config.alpha, config.topk, config.renormalize)
        return cls(graph, diffusion)


@dataclass
class StepInputs:
    """Everything random about one step, drawn before any forward pass."""

    src_batch: np.ndarray
    tgt_batch: np.ndarray
    tgt_labeled: np.ndarray
    src_plan: object
    tgt_plan: object
    src_gplan: object
    tgt_gplan: object
    src_perm: np.ndarray
    tgt_perm: np.ndarray


def draw_step(source: Domain, target: Domain, src_batch, tgt_batch, config: TrainConfig, rng) -> StepInputs:
    depth = len(config.layer_dims)
    tgt_labeled = np.asarray(target.graph.labeled, dtype=np.int64)
    tgt_nodes = np.concatenate([tgt_batch, tgt_labeled])
    seeds = rng.integers(0, 2**63 - 1, size=4)
    return StepInputs(
        src_batch=src_batch,
        tgt_batch=tgt_batch,
        tgt_labeled=tgt_labeled,
        src_plan=sample_neighborhoods(source.graph, src_batch, config.sample_sizes, int(seeds[0])),
        tgt_plan=sample_neighborhoods(target.graph, tgt_nodes, config.sample_sizes, int(seeds[1])),
        src_gplan=global_plan(source.diffusion, src_batch, depth),
        tgt_gplan=global_plan(target.diffusion, tgt_nodes, depth),
        src_perm=corruption_permutation(source.graph.num_nodes, int(seeds[2])),
        tgt_perm=corruption_permutation(target.graph.num_nodes, int(seeds[3])),
    )


@dataclass
class Losses:
    ce: ad.Tensor
    cl: ad.Tensor | None
    en: ad.Tensor | None
    encoder_objective: ad.Tensor | None = None
    classifier_objective: ad.Tensor | None = None
    routed: ad.Tensor | None = None


def forward(model: Model, source: Domain, target: Domain, inputs: StepInputs,
            lambda1: float, lambda2: float, lambda3: float, mode: str = "routed") -> Losses:
    """Assemble the losses for one step.

    ``mode="routed"`` builds the single objective whose gradient gives the
    encoders d(CE + l1 CL + l2 EN) and the classifier d(CE - l3 EN): the
    entropy term reads the target embeddings through a gradient scale of
    ``l2`` and the prototypes through a scale of ``-l3``.  ``mode="plain"``
    builds the two objectives separately (for checking the routing).
    """
    flags = model.flags
    xs, xt = source.graph.attributes, target.graph.attributes
    s_loc, s_glo = model.views(xs, inputs.src_plan, source.diffusion, inputs.src_gplan)
    t_loc, t_glo = model.views(xt, inputs.tgt_plan, target.diffusion, inputs.tgt_gplan)
    e_s = Model.join(s_loc, s_glo)
    e_t = Model.join(t_loc, t_glo)

    nb = inputs.tgt_batch.size
    e_tu = ad.take_rows(e_t, np.arange(nb))
    e_tl = ad.take_rows(e_t, np.arange(nb, nb + inputs.tgt_labeled.size))

    p_s = predict(e_s, model.w_c, model.temperature)
    p_tl = predict(e_tl, model.w_c, model.temperature) if inputs.tgt_labeled.size else None
    ce = cross_entropy(p_s, source.graph.labels[inputs.src_batch],
                       p_tl, target.graph.labels[inputs.tgt_labeled])

    cl = None
    if not flags.disable_contrastive:
        ns_loc, ns_glo = model.views(xs[inputs.src_perm], inputs.src_plan, source.diffusion, inputs.src_gplan)
        nt_loc, nt_glo = model.views(xt[inputs.tgt_perm], inputs.tgt_plan, target.diffusion, inputs.tgt_gplan)
        rows = np.arange(nb)
        cl_t = contrastive_loss(ad.take_rows(t_loc, rows), ad.take_rows(t_glo, rows),
                                ad.take_rows(nt_loc, rows), ad.take_rows(nt_glo, rows), model.w_b)
        cl = contrastive_loss(s_loc, s_glo, ns_loc, ns_glo, model.w_b) + cl_t

    use_da = not flags.disable_domain_adaptation
    out = Losses(ce=ce, cl=cl, en=None)
    if mode == "routed":
        obj = ce if cl is None else ce + ad.scalar_mul(cl, lambda1)
        if use_da:
            e_rev = ad.grad_scale(e_tu, lambda2)
            w_rev = ad.grad_scale(model.w_c, -lambda3)
            en = entropy_loss(predict(e_rev, w_rev, model.temperature))
            out.en = en
            obj = obj + en
        else:
            out.en = entropy_loss(predict(ad.constant(e_tu.value), ad.constant(model.w_c.value), model.temperature))
        out.routed = obj
    elif mode == "plain":
        en = entropy_loss(predict(e_tu, model.w_c, model.temperature))
        out.en = en
        enc = ce if cl is None else ce + ad.scalar_mul(cl, lambda1)
        cls_obj = ce
        if use_da:
            enc = enc + ad.scalar_mul(en, lambda2)
            cls_obj = ce + ad.scalar_mul(en, -lambda3)
        out.encoder_objective = enc
        out.classifier_objective = cls_obj
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


class Adam:
    """Adam with the L2 penalty added to the gradient before the moment updates."""

    def __init__(self, tensors: dict, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.tensors.items():
            g = p.grad + self.weight_decay * p.value
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.value = p.value - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class StepMetrics:
    L_CE: float
    L_CL: float
    L_EN: float
    overall: float


def train_step(model: Model, source: Domain, target: Domain, inputs: StepInputs, optimizer: Adam,
               config: TrainConfig, lr: float, lambda2: float) -> StepMetrics:
    if target.graph.unlabeled.size == 0:
        raise ConfigError("target graph has no unlabeled nodes")
    flags = model.flags
    lambda1 = 0.0 if flags.disable_contrastive else config.lambda1
    lambda3 = 0.0 if flags.disable_domain_adaptation else config.lambda3
    if flags.disable_domain_adaptation:
        lambda2 = 0.0
    losses = forward(model, source, target, inputs, lambda1, lambda2, lambda3, mode="routed")
    model.zero_grad()
    ad.backward(losses.routed)
    optimizer.step(lr)
    ce = losses.ce.item()
    cl = losses.cl.item() if losses.cl is not None else 0.0
    en = losses.en.item()
    return StepMetrics(ce, cl, en, ce + lambda1 * cl + lambda2 * en)


# --------------------------------------------------------------- evaluation

def embed_nodes(model: Model, domain: Domain, nodes, config: TrainConfig, seed: int) -> np.ndarray:
    """Embeddings for ``nodes`` computed in fixed-seed chunks (no tape kept)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    depth = len(config.layer_dims)
    out = []
    for i, start in enumerate(range(0, nodes.size, config.eval_batch)):
        chunk = nodes[start:start + config.eval_batch]
        plan = sample_neighborhoods(domain.graph, chunk, config.sample_sizes, seed + i)
        gplan = global_plan(domain.diffusion, chunk, depth)
        loc, glo = model.views(domain.graph.attributes, plan, domain.diffusion, gplan)
        out.append(Model.join(loc, glo).value)
    if not out:
        return np.zeros((0, model.w_c.shape[0]))
    return np.concatenate(out)


def predict_nodes(model: Model, domain: Domain, nodes, config: TrainConfig, seed: int) -> np.ndarray:
    e = embed_nodes(model, domain, nodes, config, seed)
    if e.shape[0] == 0:
        return np.zeros((0, model.w_c.shape[1]))
    return predict(ad.constant(e), ad.constant(model.w_c.value), model.temperature).value


def eval_seed(config: TrainConfig) -> int:
    return config.seed * 1000 + 7919


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    counts: dict
    predictions: np.ndarray


def evaluate(model: Model, target: Domain, config: TrainConfig) -> EvalResult:
    graph = target.graph
    nodes = graph.unlabeled
    truth = graph.labels[nodes]
    if nodes.size == 0 or np.any(truth < 0):
        raise ConfigError("evaluation needs ground-truth labels for every unlabeled target node")
    probs = predict_nodes(model, target, nodes, config, eval_seed(config))
    pred = np.argmax(probs, axis=1)
    correct = pred == truth
    per_class, counts = {}, {}
    for c in range(graph.num_classes):
        mask = truth == c
        counts[c] = int(mask.sum())
        per_class[c] = float(correct[mask].mean()) if mask.any() else float("nan")
    return EvalResult(float(correct.mean()), per_class, counts, pred)


def divergence_diagnostic(source_entropies, target_entropies, gamma: float) -> dict:
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    s = np.asarray(source_entropies)
    t = np.asarray(target_entropies)
    source_frac = float((s >= gamma).mean()) if s.size else 0.0
    target_frac = float((t >= gamma).mean()) if t.size else 0.0
    return {"gamma": gamma, "source_frac": source_frac, "target_frac": target_frac, "bound": 2.0 * target_frac}


def domain_entropies(model: Model, source: Domain, target: Domain, config: TrainConfig):
    seed = eval_seed(config)
    hs = row_entropy(predict_nodes(model, source, source.graph.labeled, config, seed + 500_000))
    ht = row_entropy(predict_nodes(model, target, target.graph.unlabeled, config, seed))
    return hs, ht


# -------------------------------------------------------------- experiments

@dataclass
class Report:
    rows: list
    accuracy: float
    per_class: dict
    diagnostics: list
    model: Model
    config: TrainConfig
    flags: AblationFlags

    def write_csv(self, path) -> None:
        write_report(self.rows, path)


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["iter"]] + [repr(float(r[k])) for k in REPORT_HEADER[2:]])


def _source_batches(labeled, batch_size, rng):
    while True:
        order = rng.permutation(labeled)
        for start in range(0, order.size, batch_size):
            yield np.sort(order[start:start + batch_size])


def checkpoint_meta(config: TrainConfig, flags: AblationFlags, in_dim: int, num_classes: int) -> str:
    return json.dumps({"config": config.as_dict(), "flags": asdict(flags),
                       "in_dim": in_dim, "num_classes": num_classes}, sort_keys=True)


def save_checkpoint(model: Model, path, config: TrainConfig, in_dim: int, num_classes: int) -> None:
    ad.save_tensors(path, model.state(), checkpoint_meta(config, model.flags, in_dim, num_classes))


def load_checkpoint(path):
    state, meta = ad.load_tensors(path)
    info = json.loads(meta)
    config = TrainConfig.from_dict(info["config"])
    flags = AblationFlags(**info["flags"])
    model = Model.init(info["in_dim"], info["num_classes"], config, flags, np.random.default_rng(0))
    model.load_state(state)
    return model, config, flags


def run_experiment(source_graph, target_graph, config: TrainConfig, flags: AblationFlags = AblationFlags(),
                   source_diffusion=None, target_diffusion=None, checkpoint_path=None,
                   on_epoch=None) -> Report:
    """Train on a fully labeled source and a partially labeled target.

    ``target_graph.labeled`` is taken as the labeled target set as given;
    call :func:`graphda.graph.select_labeled_per_class` beforehand.
    """
    config.validate()
    if source_graph.attr_dim != target_graph.attr_dim:
        raise ConfigError("source and target must share the union attribute vocabulary")
    if source_graph.num_classes != target_graph.num_classes:
        raise ConfigError("source and target must have the same class set")
    if target_graph.unlabeled.size == 0:
        raise ConfigError("target graph has no unlabeled nodes")
    if source_graph.labeled.size == 0:
        raise ConfigError("source graph has no labeled nodes")

    source = Domain.build(source_graph, config, source_diffusion)
    target = Domain.build(target_graph, config, target_diffusion)
    rng = np.random.default_rng(config.seed)
    model = Model.init(source_graph.attr_dim, source_graph.num_classes, config, flags, rng)
    optimizer = Adam(model.tensors(), weight_decay=config.weight_decay)

    iters = config.iterations or math.ceil(source_graph.labeled.size / config.batch_size)
    total_steps = max(config.epochs * iters, 1)
    batches = _source_batches(source_graph.labeled, config.batch_size, rng)
    unlabeled = target_graph.unlabeled
    gamma = config.diag_gamma if config.diag_gamma >= 0 else 0.5 * math.log(source_graph.num_classes)

    rows, diagnostics = [], []
    step = 0
    for epoch in range(1, config.epochs + 1):
        for it in range(1, iters + 1):
            p = step / total_steps
            lr = lr_schedule(config.eta0, p)
            lam2 = lambda2_schedule(config.lambda2_max, p, config.lambda2_mode)
            src_batch = next(batches)
            tgt_batch = np.sort(rng.choice(unlabeled, size=min(config.batch_size, unlabeled.size), replace=False))
            inputs = draw_step(source, target, src_batch, tgt_batch, config, rng)
            m = train_step(model, source, target, inputs, optimizer, config, lr, lam2)
            rows.append({"epoch": epoch, "iter": it, "L_CE": m.L_CE, "L_CL": m.L_CL,
                         "L_EN": m.L_EN, "overall": m.overall, "lr": lr,
                         "lambda2": 0.0 if flags.disable_domain_adaptation else lam2})
            step += 1
        hs, ht = domain_entropies(model, source, target, config)
        diag = divergence_diagnostic(hs, ht, gamma)
        diag["epoch"] = epoch
        diagnostics.append(diag)
        log.info("epoch %d overall=%.4f target_frac=%.3f", epoch, rows[-1]["overall"], diag["target_frac"])
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, config, source_graph.attr_dim, source_graph.num_classes)
        if on_epoch is not None:
            on_epoch(epoch, rows, diag, model)

    result = evaluate(model, target, config)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, config, source_graph.attr_dim, source_graph.num_classes)
    return Report(rows, result.accuracy, result.per_class, diagnostics, model, config, flags)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
