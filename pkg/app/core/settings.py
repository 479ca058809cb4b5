import itertools
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from app.core.errors import ConfigError
from app.core.shell_core import FP_LAMBDA, KP_LAMBDA

MODEL_KINDS = ("generic", "kp", "fp", "obukhov")
INITIAL_KINDS = ("single_shell", "seed", "powerlaw", "explicit")
OUTPUT_FORMATS = ("csv", "json", "plot")


def _key(name: str, kind: str) -> Dict[str, str]:
    return {"key": name, "type": kind}


@dataclass(frozen=True)
class ModelSection:
    kind: str = field(default="generic", metadata=_key("kind", "str"))
    lambda_: Optional[float] = field(default=None, metadata=_key("lambda", "opt_float"))
    j0: int = field(default=0, metadata=_key("j0", "int"))
    n_shells: int = field(default=40, metadata=_key("n_shells", "int"))
    lhs_scale: Optional[float] = field(default=None, metadata=_key("lhs_scale", "opt_float"))
    nu: float = field(default=0.0, metadata=_key("nu", "float"))
    viscosity_exponent: float = field(default=2.0, metadata=_key("viscosity_exponent", "float"))

    @property
    def effective_lambda(self) -> float:
        if self.lambda_ is not None:
            return self.lambda_
        return FP_LAMBDA if self.kind == "fp" else KP_LAMBDA


@dataclass(frozen=True)
class InitialSection:
    kind: str = field(default="single_shell", metadata=_key("kind", "str"))
    shell: Optional[int] = field(default=None, metadata=_key("shell", "opt_int"))
    amplitude: float = field(default=1.0, metadata=_key("amplitude", "float"))
    J: Optional[int] = field(default=None, metadata=_key("J", "opt_int"))
    q: Optional[float] = field(default=None, metadata=_key("q", "opt_float"))
    energy: float = field(default=1.0, metadata=_key("energy", "float"))
    flux: float = field(default=1.0, metadata=_key("flux", "float"))
    values: Tuple[float, ...] = field(default=(), metadata=_key("values", "float_list"))


@dataclass(frozen=True)
class IntegratorSection:
    rel_tol: float = field(default=1e-10, metadata=_key("rel_tol", "float"))
    abs_tol: float = field(default=1e-12, metadata=_key("abs_tol", "float"))
    max_step: float = field(default=math.inf, metadata=_key("max_step", "float"))
    t_end: float = field(default=10.0, metadata=_key("t_end", "float"))
    stop_norm: float = field(default=1e12, metadata=_key("stop_norm", "float"))
    stop_tail_fraction: Optional[float] = field(default=None, metadata=_key("stop_tail_fraction", "opt_float"))
    max_steps: int = field(default=200_000, metadata=_key("max_steps", "int"))
    min_step: float = field(default=1e-15, metadata=_key("min_step", "float"))


@dataclass(frozen=True)
class AnalysisSection:
    alpha: Tuple[float, ...] = field(default=(1.0,), metadata=_key("alpha", "float_list"))
    mu: Optional[float] = field(default=None, metadata=_key("mu", "opt_float"))
    delta: float = field(default=1.0, metadata=_key("delta", "float"))
    epsilon: Optional[float] = field(default=None, metadata=_key("epsilon", "opt_float"))
    J: Optional[int] = field(default=None, metadata=_key("J", "opt_int"))
    tail_shells: Tuple[int, ...] = field(default=(), metadata=_key("tail_shells", "int_list"))
    lemma_cascade: bool = field(default=True, metadata=_key("lemma_cascade", "bool"))
    norm_certificate: bool = field(default=True, metadata=_key("norm_certificate", "bool"))
    blowup_fit: bool = field(default=True, metadata=_key("blowup_fit", "bool"))

    @property
    def enabled(self) -> bool:
        return self.lemma_cascade or self.norm_certificate or self.blowup_fit


@dataclass(frozen=True)
class OutputSection:
    directory: str = field(default="result", metadata=_key("directory", "str"))
    stride: int = field(default=1, metadata=_key("stride", "int"))
    formats: Tuple[str, ...] = field(default=OUTPUT_FORMATS, metadata=_key("formats", "str_list"))


@dataclass(frozen=True)
class RunConfig:
    """
    1 回のシミュレーション実行を記述する設定です。
    テキスト形式は 1 行 1 項目の `section.key = value` です。
    """
    model: ModelSection = ModelSection()
    initial: InitialSection = InitialSection()
    integrator: IntegratorSection = IntegratorSection()
    analysis: AnalysisSection = AnalysisSection()
    output: OutputSection = OutputSection()


SECTIONS = ("model", "initial", "integrator", "analysis", "output")


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got '{text}'")


def _parse_optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return None if text.lower() == "none" else parser(text)
    return parse


def _parse_list(parser: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse(text: str) -> Tuple[Any, ...]:
        return tuple(parser(item.strip()) for item in text.split(",") if item.strip())
    return parse


def _parse_int(text: str) -> int:
    return int(text)


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "str": str,
    "int": _parse_int,
    "float": float,
    "bool": _parse_bool,
    "opt_int": _parse_optional(_parse_int),
    "opt_float": _parse_optional(float),
    "float_list": _parse_list(float),
    "int_list": _parse_list(_parse_int),
    "str_list": _parse_list(str),
}


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_render_value(v) for v in value)
    return str(value)


def _schema() -> Dict[str, Tuple[str, str, str]]:
    """'section.key' -> (section, 属性名, 型名)。"""
    schema = {}
    for section in SECTIONS:
        cls = type(getattr(RunConfig(), section))
        for f in fields(cls):
            schema[f"{section}.{f.metadata['key']}"] = (section, f.name, f.metadata["type"])
    return schema


def render_config(config: RunConfig) -> str:
    """全キーを正規順で出力します。parse_config(render_config(c)) == c。"""
    lines = []
    for section in SECTIONS:
        part = getattr(config, section)
        for f in fields(part):
            lines.append(f"{section}.{f.metadata['key']} = {_render_value(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    `section.key = value` 形式のテキストを検証済みの RunConfig に変換します。

    Args:
        text (str): 設定テキスト（# 以降はコメント）。
        overrides (Optional[Dict[str, str]]): スイープ用の上書き値（行番号 0 として扱う）。

    Raises:
        ConfigError: 構文エラー・未知キー・範囲外・整合性違反をすべてまとめて送出します。
    """
    schema = _schema()
    errors: List[Tuple[int, str]] = []
    values: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    lines_of: Dict[str, int] = {}

    def assign(line_no: int, key: str, raw: str) -> None:
        if key not in schema:
            errors.append((line_no, f"unknown key '{key}'"))
            return
        section, attr, kind = schema[key]
        try:
            values[section][attr] = _PARSERS[kind](raw)
        except ValueError as e:
            errors.append((line_no, f"{key}: cannot parse '{raw}' ({e})"))
            return
        lines_of[key] = line_no

    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append((line_no, f"syntax error: expected 'section.key = value', got '{stripped}'"))
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if "." not in key:
            errors.append((line_no, f"syntax error: key '{key}' has no section"))
            continue
        if key in lines_of:
            errors.append((line_no, f"duplicate key '{key}' (first set on line {lines_of[key]})"))
            continue
        assign(line_no, key, raw)

    for key, raw in (overrides or {}).items():
        assign(0, key, str(raw))

    if errors:
        raise ConfigError(errors)
    config = RunConfig(**{s: type(getattr(RunConfig(), s))(**values[s]) for s in SECTIONS})
    errors.extend(validate_config(config, lines_of))
    if errors:
        raise ConfigError(errors)
    return config


def validate_config(config: RunConfig, lines_of: Optional[Dict[str, int]] = None) -> List[Tuple[int, str]]:
    """範囲と整合性を検査し、(行番号, メッセージ) のリストを返します。"""
    lines_of = lines_of or {}
    errors: List[Tuple[int, str]] = []

    def err(key: str, message: str) -> None:
        errors.append((lines_of.get(key, 0), f"{key}: {message}"))

    m = config.model
    if m.kind not in MODEL_KINDS:
        err("model.kind", f"must be one of {', '.join(MODEL_KINDS)} (got '{m.kind}')")
    if m.lambda_ is not None:
        if not m.lambda_ > 1.0:
            err("model.lambda", f"range violation: lambda must be > 1 (got {m.lambda_})")
        elif m.kind == "kp" and not math.isclose(m.lambda_, KP_LAMBDA):
            err("model.lambda", f"consistency error: kind kp forces lambda = 2 (got {m.lambda_})")
        elif m.kind == "fp" and not math.isclose(m.lambda_, FP_LAMBDA):
            err("model.lambda", f"consistency error: kind fp forces lambda = 2^(5/2) (got {m.lambda_})")
    if m.n_shells < 2:
        err("model.n_shells", f"range violation: must be >= 2 (got {m.n_shells})")
    if m.lhs_scale is not None:
        if not m.lhs_scale > 0.0:
            err("model.lhs_scale", "range violation: must be > 0")
        elif m.kind != "generic":
            err("model.lhs_scale", f"consistency error: fixed by kind {m.kind}")
    if m.nu < 0.0:
        err("model.nu", "range violation: must be >= 0")
    elif m.nu > 0.0 and m.kind != "obukhov":
        err("model.nu", "consistency error: viscosity is only defined for kind obukhov")

    first, last = m.j0, m.j0 + max(m.n_shells, 1) - 1

    def within(key: str, shell: Optional[int]) -> None:
        if shell is not None and not first <= shell <= last:
            err(key, f"shell {shell} outside truncation [{first}, {last}]")

    i = config.initial
    if i.kind not in INITIAL_KINDS:
        err("initial.kind", f"must be one of {', '.join(INITIAL_KINDS)} (got '{i.kind}')")
    within("initial.shell", i.shell)
    within("initial.J", i.J)
    if not math.isfinite(i.amplitude):
        err("initial.amplitude", "must be finite")
    if i.q is not None and not 0.0 < i.q < 1.0:
        err("initial.q", f"range violation: q must lie in (0, 1) (got {i.q})")
    if not i.energy > 0.0:
        err("initial.energy", "range violation: must be > 0")
    if i.flux < 0.0:
        err("initial.flux", "range violation: must be >= 0")
    if i.kind == "powerlaw" and m.kind != "obukhov":
        err("initial.kind", "consistency error: powerlaw initial state needs kind obukhov")
    if i.kind == "explicit" and len(i.values) != m.n_shells:
        err("initial.values", f"expected {m.n_shells} values (got {len(i.values)})")

    g = config.integrator
    for key, value in (("integrator.rel_tol", g.rel_tol), ("integrator.abs_tol", g.abs_tol),
                       ("integrator.t_end", g.t_end), ("integrator.max_step", g.max_step),
                       ("integrator.min_step", g.min_step)):
        if not value > 0.0:
            err(key, f"range violation: must be > 0 (got {value})")
    if not g.stop_norm > 1.0:
        err("integrator.stop_norm", "range violation: must be > 1")
    if g.stop_tail_fraction is not None and not 0.0 < g.stop_tail_fraction <= 1.0:
        err("integrator.stop_tail_fraction", "range violation: must lie in (0, 1]")
    if g.max_steps < 1:
        err("integrator.max_steps", "range violation: must be >= 1")

    a = config.analysis
    if not a.alpha:
        err("analysis.alpha", "at least one alpha is required")
    for alpha in a.alpha:
        if not alpha > 0.0:
            err("analysis.alpha", f"range violation: alpha must be > 0 (got {alpha})")
    if a.mu is not None and not a.mu > 1.0:
        err("analysis.mu", f"range violation: mu must be > 1 (got {a.mu})")
    if a.epsilon is not None:
        if not a.epsilon > 0.0:
            err("analysis.epsilon", "range violation: must be > 0")
        if m.kind not in ("fp", "kp"):
            err("analysis.epsilon", "consistency error: epsilon constants exist for kinds fp and kp")
    within("analysis.J", a.J)
    for shell in a.tail_shells:
        within("analysis.tail_shells", shell)

    o = config.output
    if not o.directory:
        err("output.directory", "must not be empty")
    if o.stride < 1:
        err("output.stride", "range violation: must be >= 1")
    for fmt in o.formats:
        if fmt not in OUTPUT_FORMATS:
            err("output.formats", f"unknown format '{fmt}'")
    return errors


def parse_grid(text: str) -> List[Dict[str, str]]:
    """
    `key=v1,v2;key2=w1,w2` を直積に展開したセルのリストを返します。空文字列は空のグリッドです。
    """
    axes: List[Tuple[str, List[str]]] = []
    schema = _schema()
    errors = []
    for part in text.replace("\n", ";").split(";"):
        part = part.strip()
        if not part or part.startswith("#"):
            continue
        if "=" not in part:
            errors.append((0, f"grid syntax error: '{part}'"))
            continue
        key, raw = (p.strip() for p in part.split("=", 1))
        if key not in schema:
            errors.append((0, f"grid: unknown key '{key}'"))
            continue
        axes.append((key, [v.strip() for v in raw.split(",") if v.strip()]))
    if errors:
        raise ConfigError(errors)
    if not axes:
        return []
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(vals for _, vals in axes))]


def with_output_directory(config: RunConfig, directory: str) -> RunConfig:
    return replace(config, output=replace(config.output, directory=directory))


class Settings:
    """
    実行設定ファイルの読み込み・保存を行うクラスです。
    ファイルが存在しない場合は既定値で作成します。
    """

    def __init__(self, config_path: str = os.path.join("app", "data", "dyadic_burgers_demo.cfg"),
                 create_if_missing: bool = True) -> None:
        """
        Args:
            config_path (str): 設定ファイルのパス。
            create_if_missing (bool): ファイルがない場合に既定値で作成するか。False なら FileNotFoundError。
        """
        self.config_path: str = config_path
        self.create_if_missing = create_if_missing
        self.config: RunConfig = RunConfig()
        settings_dir = os.path.dirname(self.config_path)
        if create_if_missing and settings_dir and not os.path.exists(settings_dir):
            os.makedirs(settings_dir)
            logging.info(f"設定ディレクトリ {settings_dir} を作成しました。")
        self.load_settings()

    def load_settings(self) -> None:
        """
        設定ファイルを読み込みます。存在しない・空の場合は既定値を保存します。

        Raises:
            ConfigError: 設定内容が不正な場合。
        """
        if os.path.exists(self.config_path) and os.path.getsize(self.config_path) > 0:
            with open(self.config_path, "r", encoding="utf-8") as f:
                text = f.read()
            self.config = parse_config(text)
            logging.info(f"設定ファイルを読み込みました: {self.config_path}")
            logging.debug(f"Loaded config: {self.config}")
        elif not self.create_if_missing:
            raise FileNotFoundError(f"設定ファイルが見つかりません: {self.config_path}")
        else:
            logging.warning("設定ファイルが存在しないか空です。デフォルト設定を使用します。")
            self.config = RunConfig()
            self.save_settings()

    def save_settings(self) -> None:
        """現在の設定を正規形で保存します。"""
        with open(self.config_path, "w", encoding="utf-8") as f:
            f.write(render_config(self.config))
        logging.info(f"設定ファイルを保存しました: {self.config_path}")

    def overridden(self, overrides: Dict[str, str]) -> RunConfig:
        return parse_config(render_config(self.config), overrides)


def load_grid(spec: str) -> List[Dict[str, str]]:
    """ファイルパスならその内容を、そうでなければ文字列そのものをグリッドとして解釈します。"""
    if os.path.isfile(spec):
        with open(spec, "r", encoding="utf-8") as f:
            spec = f.read()
    return parse_grid(spec)


def describe_overrides(cell: Dict[str, str], keys: Sequence[str]) -> str:
    return "_".join(f"{k.split('.')[-1]}={cell[k]}" for k in keys)
