"""
config.py — environment settings and run-configuration files.

Run files are UTF-8 `key = value` lines with `#` comments and dotted keys for the
sections, e.g.

    form          = three_split
    epochs        = 50
    net.dims      = 784,64,64,10
    bcd.w_reg     = fro:0.001
    data.source   = mnist
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv

load_dotenv(dotenv_path=Path(__file__).parent.parent / ".env", override=False)

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from bcdtrain.baseline import SgdConfig
from bcdtrain.data import IMAGE_MAGIC, MNIST_FILES, read_idx_header
from bcdtrain.errors import BcdError, ConfigError, IdxFormatError
from bcdtrain.operators import Activation, LossKind, RegKind, Regularizer
from bcdtrain.state import Form, Hyperparams, NetworkSpec, UpdateOrder, VnStrategy


class Settings(BaseSettings):

    # Logging
    log_level: str = Field("INFO")

    # Paths
    runs_dir:  str = Field("./runs")
    mnist_dir: str = Field("./data/mnist")

    # MNIST download
    mnist_base_url: str   = Field("https://storage.googleapis.com/cvdf-datasets/mnist/")
    http_timeout:   float = Field(60.0)

    # prox-check defaults
    prox_check_cases: int = Field(10_000)
    prox_check_seed:  int = Field(7)

    model_config = {
        "env_prefix":        "BCD_",
        "env_file":          ".env",
        "env_file_encoding": "utf-8",
        "extra":             "ignore",
    }


@lru_cache
def get_settings() -> Settings:
    return Settings()


# ── Run configuration ──────────────────────────────────────────────────────

def _split(v):
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return v


def _none(v):
    if isinstance(v, str) and v.strip().lower() in ("", "none"):
        return None
    return v


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetSection(_Section):
    dims:        tuple[int, ...] = (784,) + (64,) * 10 + (10,)
    activations: tuple[str, ...] = ("relu",)
    bias:        bool            = True

    @field_validator("dims", mode="before")
    @classmethod
    def _dims(cls, v):
        v = _split(v)
        if len(v) < 2:
            raise ValueError("needs at least an input and an output size")
        return v

    @field_validator("dims")
    @classmethod
    def _positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError("sizes must be positive")
        return v

    @field_validator("activations", mode="before")
    @classmethod
    def _acts(cls, v):
        return [str(Activation.parse(a)) for a in _split(v)]


class BcdSection(_Section):
    gamma:         float      = Field(1.0, gt=0)
    alpha:         float      = Field(1.0, gt=0)
    loss:          LossKind   = LossKind.SQUARED
    w_reg:         tuple[str, ...] = ("none",)
    v_reg:         tuple[str, ...] = ("none",)
    update_order:  str        = "backward"
    vn_strategy:   Literal["auto", "exact", "prox_linear"] = "auto"
    inner_iters:   int        = Field(100, ge=1)
    inner_tol:     float      = Field(1e-10, gt=0)
    batch_size:    int | None = Field(None, ge=1)
    init_std:      float      = Field(0.01, ge=0)
    init_bias:     float      = 0.1
    check_descent: bool       = True

    @field_validator("w_reg", "v_reg", mode="before")
    @classmethod
    def _regs(cls, v):
        return [str(Regularizer.parse(r)) for r in _split(v)]

    @field_validator("update_order", mode="before")
    @classmethod
    def _order(cls, v):
        return str(UpdateOrder.parse(v))

    @field_validator("batch_size", mode="before")
    @classmethod
    def _optional(cls, v):
        return _none(v)


class SgdSection(_Section):
    lr:     float      = Field(0.001, ge=0)
    batch:  int        = Field(512, ge=1)
    epochs: int | None = Field(None, ge=1)

    @field_validator("epochs", mode="before")
    @classmethod
    def _optional(cls, v):
        return _none(v)


class SyntheticSection(_Section):
    n:       int        = Field(600, ge=1)
    n_test:  int        = Field(200, ge=0)
    d0:      int | None = Field(None, ge=1)
    classes: int | None = Field(None, ge=1)
    spread:  float      = Field(0.1, ge=0)

    @field_validator("d0", "classes", mode="before")
    @classmethod
    def _optional(cls, v):
        return _none(v)


class DataSection(_Section):
    source:    Literal["synthetic", "mnist"] = "synthetic"
    mnist_dir: str | None = None
    n_train:   int | None = Field(None, ge=1)
    n_test:    int | None = Field(None, ge=0)
    synthetic: SyntheticSection = SyntheticSection()

    @field_validator("mnist_dir", "n_train", "n_test", mode="before")
    @classmethod
    def _optional(cls, v):
        return _none(v)


class OutputSection(_Section):
    dir:               str | None = None
    wall_clock_in_csv: bool       = False

    @field_validator("dir", mode="before")
    @classmethod
    def _optional(cls, v):
        return _none(v)


class RunConfig(_Section):
    form:   Form = Form.THREE_SPLIT
    epochs: int  = Field(50, ge=1)
    seed:   int  = Field(0, ge=0)
    net:    NetSection    = NetSection()
    bcd:    BcdSection    = BcdSection()
    sgd:    SgdSection    = SgdSection()
    data:   DataSection   = DataSection()
    output: OutputSection = OutputSection()

    @property
    def mnist_dir(self) -> Path:
        return Path(self.data.mnist_dir or get_settings().mnist_dir)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir or get_settings().runs_dir)


# ── Conversions ────────────────────────────────────────────────────────────

def to_network_spec(cfg: RunConfig) -> NetworkSpec:
    dims = cfg.net.dims
    N = len(dims) - 1
    acts = [Activation.parse(a) for a in cfg.net.activations]
    if len(acts) == 1:
        acts = acts * (N - 1) + [Activation.parse("identity")]
    elif len(acts) == N - 1:
        acts = acts + [Activation.parse("identity")]
    elif len(acts) != N:
        raise ValueError(f"needs 1, {N - 1} or {N} activations, got {len(acts)}")
    return NetworkSpec(dims, tuple(acts), residual=cfg.form is Form.RESIDUAL, bias=cfg.net.bias)


def to_hyperparams(cfg: RunConfig) -> Hyperparams:
    b = cfg.bcd
    return Hyperparams(
        gamma        = b.gamma,
        alpha        = b.alpha,
        loss         = b.loss,
        w_reg        = tuple(Regularizer.parse(r) for r in b.w_reg),
        v_reg        = tuple(Regularizer.parse(r) for r in b.v_reg),
        update_order = UpdateOrder.parse(b.update_order),
        vn_strategy  = None if b.vn_strategy == "auto" else VnStrategy(b.vn_strategy),
        inner_iters  = b.inner_iters,
        inner_tol    = b.inner_tol,
        seed         = cfg.seed,
        batch_size   = b.batch_size,
    )


def to_sgd_config(cfg: RunConfig) -> SgdConfig:
    return SgdConfig(cfg.sgd.lr, cfg.sgd.batch, cfg.sgd.epochs or cfg.epochs, cfg.seed)


# ── Parsing ────────────────────────────────────────────────────────────────

def _line_for(key: str, lines: dict[str, int]) -> int | None:
    while key:
        if key in lines:
            return lines[key]
        key = key.rpartition(".")[0]
    return None


def _check_consistency(cfg: RunConfig, lines: dict[str, int]) -> None:
    def fail(key: str, message: str):
        raise ConfigError(key, _line_for(key, lines), message)

    try:
        spec = to_network_spec(cfg)
    except (ValueError, BcdError) as e:
        fail("net.activations" if "activation" in str(e) else "net.dims", str(e))
    N = spec.N

    try:
        hp = to_hyperparams(cfg)
    except BcdError as e:
        fail("bcd.vn_strategy", str(e))
    for key, regs in (("bcd.w_reg", hp.w_reg), ("bcd.v_reg", hp.v_reg)):
        if len(regs) not in (1, N):
            fail(key, f"needs 1 or {N} entries, got {len(regs)}")
    try:
        hp.update_order.sequence(N)
    except ValueError as e:
        fail("bcd.update_order", str(e))
    if cfg.bcd.loss is LossKind.HINGE and hp.v_reg_of(N).kind in (RegKind.L1, RegKind.ELASTIC):
        fail("bcd.v_reg", "hinge loss supports none, fro, nonneg or box on the output layer")

    if cfg.data.source == "synthetic":
        syn = cfg.data.synthetic
        if syn.d0 is not None and syn.d0 != spec.dims[0]:
            fail("data.synthetic.d0", f"{syn.d0} does not match net.dims[0] = {spec.dims[0]}")
        if syn.classes is not None and syn.classes != spec.dims[-1]:
            fail("data.synthetic.classes", f"{syn.classes} does not match the output size {spec.dims[-1]}")
        if (syn.classes or spec.dims[-1]) > syn.n:
            fail("data.synthetic.n", "must be at least the number of classes")
        n_train = min(cfg.data.n_train or syn.n, syn.n)
    else:
        root = cfg.mnist_dir
        for name in MNIST_FILES.values():
            if not (root / name).is_file():
                fail("data.mnist_dir", f"missing {root / name}")
        try:
            magic, dims = read_idx_header(root / MNIST_FILES["train_images"])
        except (OSError, IdxFormatError) as e:
            fail("data.mnist_dir", str(e))
        if magic != IMAGE_MAGIC or len(dims) != 3 or dims[1] * dims[2] != spec.dims[0]:
            fail("net.dims", f"input size {spec.dims[0]} does not match the MNIST images {dims[1:]}")
        if spec.dims[-1] != 10:
            fail("net.dims", f"MNIST needs 10 outputs, got {spec.dims[-1]}")
        n_train = min(cfg.data.n_train or dims[0], dims[0])

    if cfg.sgd.batch > n_train:
        fail("sgd.batch", f"{cfg.sgd.batch} exceeds the {n_train} training samples")
    try:
        hp.check_prox_linear(n_train, spec.dims[-1])
    except BcdError as e:
        fail("bcd.alpha", str(e))


def parse_config_text(text: str) -> RunConfig:
    raw: dict = {}
    lines: dict[str, int] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(key or body, no, "expected `key = value`")
        if key in lines:
            raise ConfigError(key, no, f"duplicate key (first set on line {lines[key]})")
        lines[key] = no

        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, no, f"{part!r} is a value, not a section")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(key, no, "is a section, not a value")
        node[parts[-1]] = value

    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        key = ".".join(str(p) for p in err["loc"] if not isinstance(p, int)) or "<root>"
        raise ConfigError(key, _line_for(key, lines), err["msg"]) from None
    _check_consistency(cfg, lines)
    return cfg


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(model: BaseModel, prefix: str = "") -> list[str]:
    out = []
    for name, value in model:
        if isinstance(value, BaseModel):
            out.extend(_flatten(value, f"{prefix}{name}."))
        else:
            out.append(f"{prefix}{name} = {_render(value)}")
    return out


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field; parse_config_text(dump_config(c)) == c."""
    return "\n".join(["# bcdtrain run configuration", *_flatten(cfg)]) + "\n"
