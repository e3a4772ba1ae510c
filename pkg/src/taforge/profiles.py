"""Per-TZOS ABI contracts and the ``key = value`` profile config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

W32, W64 = 32, 64

STATIC_ONLY = "STATIC_ONLY"
DYNAMIC_LIST = "DYNAMIC_LIST"
COMMON_LIBRARY = "COMMON_LIBRARY"
POLICIES = (STATIC_ONLY, DYNAMIC_LIST, COMMON_LIBRARY)

ROLES = ("init", "create", "open", "invoke")

# symbol names starting with "@" are looked up in the image's metadata section
META_PREFIX = "@"

# GP return codes
TEE_SUCCESS = 0
TEE_ERROR_BAD_PARAMETERS = 0xFFFF0006
TEE_ERROR_BAD_STATE = 0xFFFF0007
TEE_ERROR_NOT_SUPPORTED = 0xFFFF000A

# GP parameter types
PT_NONE = 0
PT_VALUE_INPUT, PT_VALUE_OUTPUT, PT_VALUE_INOUT = 1, 2, 3
PT_MEMREF_INPUT, PT_MEMREF_OUTPUT, PT_MEMREF_INOUT = 5, 6, 7


def param_types(*slots: int) -> int:
    slots = tuple(slots) + (PT_NONE,) * (4 - len(slots))
    return sum((t & 0xF) << (4 * i) for i, t in enumerate(slots))


DEFAULT_PARAM_TYPES = param_types(PT_MEMREF_INPUT, PT_MEMREF_INOUT)


@dataclass(frozen=True)
class ParamConvention:
    """How the invoke entrypoint receives a command.

    ``style`` is ``GP`` (4-slot TEE_Param array plus a param-types word) or
    ``BUFFERS`` (request pointer/size, response pointer, response-size pointer).
    ``args`` names the register arguments in order.
    """

    style: str
    args: tuple[str, ...]

    @property
    def cmd_register(self) -> int:
        return self.args.index("cmd")


GP_OPTEE = ParamConvention("GP", ("func", "session", "cmd", "param_types", "params"))
GP_TEEGRIS = ParamConvention("GP", ("session", "cmd", "param_types", "params"))
BUFFERS = ParamConvention("BUFFERS", ("cmd", "req", "req_size", "rsp", "rsp_size_ptr"))

# OP-TEE style __ta_entry function selectors
OPTEE_OPEN_SESSION, OPTEE_INVOKE, OPTEE_CLOSE_SESSION = 0, 1, 2


@dataclass(frozen=True)
class TzosProfile:
    name: str
    entry_symbols: tuple[tuple[str, str], ...]
    dependency_policy: str
    syscall_table_id: str
    param_convention: ParamConvention
    common_library_base: int | None = None
    word_widths: tuple[int, ...] = (W32, W64)
    error_code: int = TEE_ERROR_BAD_PARAMETERS

    def __post_init__(self):
        roles = [r for r, _ in self.entry_symbols]
        if roles.count("invoke") != 1:
            raise ConfigError(f"profile {self.name}: exactly one invoke entry required")
        for r in roles:
            if r not in ROLES:
                raise ConfigError(f"profile {self.name}: unknown entry role {r!r}")
        if self.dependency_policy not in POLICIES:
            raise ConfigError(f"profile {self.name}: bad dependency policy {self.dependency_policy}")
        if (self.common_library_base is not None) != (self.dependency_policy == COMMON_LIBRARY):
            raise ConfigError(f"profile {self.name}: common_library_base iff COMMON_LIBRARY")

    def entry(self, role: str) -> str | None:
        for r, s in self.entry_symbols:
            if r == role:
                return s
        return None

    @property
    def init_roles(self) -> list[str]:
        """Roles called once before fuzzing, in call order."""
        return [r for r, _ in self.entry_symbols if r != "invoke"]


OPTEE = TzosProfile(
    "OPTEE", (("invoke", "__ta_entry"),), STATIC_ONLY, "OPTEE", GP_OPTEE)
TEEGRIS = TzosProfile(
    "TEEGRIS",
    (("create", "TA_CreateEntryPoint"), ("open", "TA_OpenSessionEntryPoint"),
     ("invoke", "TA_InvokeCommandEntryPoint")),
    DYNAMIC_LIST, "TEEGRIS", GP_TEEGRIS)
QSEE = TzosProfile(
    "QSEE", (("init", "tz_app_init"), ("invoke", "CApp_invoke")),
    COMMON_LIBRARY, "QSEE", BUFFERS, common_library_base=0x00C00000, word_widths=(W32,))
TRUSTY = TzosProfile(
    "TRUSTY", (("invoke", META_PREFIX + "message_handler"),), STATIC_ONLY, "TRUSTY", BUFFERS,
    word_widths=(W64,))

PROFILES = {p.name: p for p in (OPTEE, TEEGRIS, QSEE, TRUSTY)}


@dataclass(frozen=True)
class LayoutConfig:
    """Address window the loader places everything in."""

    window_lo: int = 0x00400000
    window_hi: int = 0x10000000
    stack_size: int | None = None
    page_size: int = 4096

    def __post_init__(self):
        if self.window_lo % self.page_size or self.window_hi % self.page_size:
            raise ConfigError("window bounds must be page aligned")
        if self.window_lo >= self.window_hi:
            raise ConfigError("empty address window")


DEFAULT_STACK_SIZE = 1 << 20


def _int(v: str) -> int:
    try:
        return int(v, 0)
    except ValueError:
        raise ConfigError(f"not an integer: {v!r}") from None


def parse_profile_config(text: str, base: TzosProfile | None = None) -> tuple[TzosProfile, LayoutConfig]:
    """Parse ``key = value`` lines into a profile and layout.

    Keys: name, entry.<role>, dependency_policy, common_library_base,
    syscall_table, param_convention (GP_OPTEE/GP_TEEGRIS/BUFFERS),
    word_widths, error_code, window_lo, window_hi, stack_size.  Unset keys
    inherit from the built-in profile named by ``name`` (or ``base``).
    """
    kv: list[tuple[str, str]] = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        kv.append((k, v))
    d = dict(kv)
    if base is None:
        if "name" in d and d["name"] in PROFILES:
            base = PROFILES[d["name"]]
        elif "name" not in d:
            raise ConfigError("profile config needs a name")
    changes: dict = {}
    entries = [(k.split(".", 1)[1], v) for k, v in kv if k.startswith("entry.")]
    if entries:
        changes["entry_symbols"] = tuple(entries)
    conventions = {"GP_OPTEE": GP_OPTEE, "GP_TEEGRIS": GP_TEEGRIS, "BUFFERS": BUFFERS}
    layout_kw = {}
    for k, v in kv:
        if k == "name":
            changes["name"] = v
        elif k == "dependency_policy":
            changes["dependency_policy"] = v.upper()
        elif k == "common_library_base":
            changes["common_library_base"] = None if v.lower() == "none" else _int(v)
        elif k == "syscall_table":
            changes["syscall_table_id"] = v
        elif k == "param_convention":
            if v not in conventions:
                raise ConfigError(f"unknown param convention {v}")
            changes["param_convention"] = conventions[v]
        elif k == "word_widths":
            changes["word_widths"] = tuple(_int(x) for x in v.split(","))
        elif k == "error_code":
            changes["error_code"] = _int(v)
        elif k in ("window_lo", "window_hi", "stack_size"):
            layout_kw[k] = _int(v)
        elif k.startswith("entry."):
            pass
        else:
            raise ConfigError(f"unknown profile key {k!r}")
    if changes.get("dependency_policy", getattr(base, "dependency_policy", None)) != COMMON_LIBRARY:
        changes.setdefault("common_library_base", None)
    if base is not None:
        profile = dataclasses.replace(base, **changes)
    else:
        for req in ("entry_symbols", "dependency_policy", "syscall_table_id", "param_convention"):
            if req not in changes:
                raise ConfigError(f"custom profile needs {req}")
        profile = TzosProfile(**changes)
    return profile, LayoutConfig(**layout_kw)


def resolve_profile(name_or_path: str) -> tuple[TzosProfile, LayoutConfig]:
    """Accept a built-in profile name or a path to a config file."""
    if name_or_path.upper() in PROFILES:
        return PROFILES[name_or_path.upper()], LayoutConfig()
    p = Path(name_or_path)
    if not p.is_file():
        raise ConfigError(f"unknown profile {name_or_path!r}")
    return parse_profile_config(p.read_text())


def format_profile_config(profile: TzosProfile, layout: LayoutConfig | None = None) -> str:
    layout = layout or LayoutConfig()
    conv = {GP_OPTEE: "GP_OPTEE", GP_TEEGRIS: "GP_TEEGRIS", BUFFERS: "BUFFERS"}[profile.param_convention]
    lines = [f"name = {profile.name}"]
    lines += [f"entry.{r} = {s}" for r, s in profile.entry_symbols]
    lines += [f"dependency_policy = {profile.dependency_policy}",
              f"common_library_base = {profile.common_library_base:#x}" if profile.common_library_base is not None
              else "common_library_base = none",
              f"syscall_table = {profile.syscall_table_id}",
              f"param_convention = {conv}",
              "word_widths = " + ",".join(str(w) for w in profile.word_widths),
              f"error_code = {profile.error_code:#x}",
              f"window_lo = {layout.window_lo:#x}",
              f"window_hi = {layout.window_hi:#x}"]
    if layout.stack_size is not None:
        lines.append(f"stack_size = {layout.stack_size:#x}")
    return "\n".join(lines) + "\n"
