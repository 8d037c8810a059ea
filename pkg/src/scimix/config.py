"""Plain-text experiment configuration: ``[section]`` headers + ``key = value``.

Chosen over nested formats for diff-friendliness. Unknown keys are rejected
so typos cannot silently fall back to defaults. The config hash is a sha256
digest of the canonicalized (sorted) document, stable under key reordering.
"""

from __future__ import annotations

import hashlib


class ConfigError(Exception):
    """Invalid configuration document (unknown key, bad value, bad constraint)."""


# section -> key -> (type, default)
SCHEMA = {
    "data": {
        "image_size": (int, 32),
        "channels": (int, 3),
        "n_classes": (int, 4),
        "n_train": (int, 4000),
        "n_test": (int, 1000),
        "glyph_scale": (float, 0.55),
        "jitter": (float, 0.12),
        "seed": (int, 0),
    },
    "model": {
        "d_c": (int, 128),
        "c_r": (int, 64),
        "downsample": (int, 8),
        "width": (int, 16),
        "gen_width": (int, 32),
        "disc_width": (int, 16),
    },
    "split": {
        "n_labeled": (int, 400),
        "seed": (int, 0),
    },
    "gen_train": {
        "epochs": (int, 10),
        "batch_size": (int, 64),
        "lr_gen": (float, 2e-4),
        "lr_disc": (float, 2e-4),
        "lr_clf": (float, 1e-3),
        "w_rec": (float, 1.0),
        "w_adv_r": (float, 1.0),
        "w_sem": (float, 1.0),
        "w_hyb_class_pos": (float, 1.0),
        "w_hyb_cont_pos": (float, 1.0),
        "w_hyb_class_neg": (float, 1.0),
        "w_hyb_cont_neg": (float, 1.0),
        "w_adv_h": (float, 1.0),
        "margin_class": (float, 10.0),
        "margin_cont": (float, 1.0),
        "squared_norms": (bool, True),
        "ema_decay": (float, 0.99),
        "consistency_weight": (float, 1.0),
        "ramp_frac": (float, 0.1),
        "hybrid_warmup_frac": (float, 0.1),
        "disc_steps_per_gen": (int, 1),
        "variant": (str, "full"),
        "checkpoint_every": (int, 0),
        "seed": (int, 0),
    },
    "hybrids": {
        "mixer": (str, "scimix"),
        "mixup_alpha": (float, 1.0),
        "fda_beta": (float, 0.1),
        "pairing_seed": (int, 0),
        "n_hybrids": (int, 256),
    },
    "clf_train": {
        "backbone": (str, "supervised"),
        "hybrid_loss": (str, "none"),
        "alpha": (float, 0.7),
        "init": (str, "random"),
        "epochs": (int, 20),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "lr_decay_epochs": (int, 0),
        "ema_decay": (float, 0.99),
        "consistency_weight": (float, 1.0),
        "ramp_frac": (float, 0.1),
        "fixmatch_threshold": (float, 0.95),
        "fixmatch_weight": (float, 1.0),
        "hybrid_weight": (float, 1.0),
        "seed": (int, 0),
    },
    "oracle": {
        "epochs": (int, 15),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "seed": (int, 0),
    },
}

VARIANTS = ("full", "structural_zc", "no_hyb", "basic_hyb", "nonfrozen_hyb")
BACKBONES = ("supervised", "meanteacher", "fixmatch_lite")
HYBRID_LOSSES = ("none", "contradict", "labeled", "pseudo_label", "consistency")
MIXERS = ("scimix", "mixup", "cutmix", "fda", "adain")


def _parse_value(typ, raw, where):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {where}: {raw!r}") from None


class ExperimentConfig:
    """Flat, schema-checked key-value document with a stable content hash."""

    def __init__(self, values=None):
        self._values = {}
        for section, keys in SCHEMA.items():
            self._values[section] = {k: default for k, (_, default) in keys.items()}
        if values:
            for (section, key), val in values.items():
                self.set(section, key, val)

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key: {section}.{key}")
        typ = SCHEMA[section][key][0]
        if isinstance(value, str) and typ is not str:
            value = _parse_value(typ, value, f"{section}.{key}")
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(f"bad type for {section}.{key}: {value!r}")
        self._values[section][key] = value

    def __getitem__(self, section):
        if section not in self._values:
            raise ConfigError(f"unknown config section: {section}")
        return dict(self._values[section])

    def get(self, section, key):
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key: {section}.{key}") from None

    def validate(self):
        if self.get("gen_train", "variant") not in VARIANTS:
            raise ConfigError(f"unknown gen_train.variant: {self.get('gen_train', 'variant')}")
        if self.get("clf_train", "backbone") not in BACKBONES:
            raise ConfigError(f"unknown clf_train.backbone: {self.get('clf_train', 'backbone')}")
        if self.get("clf_train", "hybrid_loss") not in HYBRID_LOSSES:
            raise ConfigError(f"unknown clf_train.hybrid_loss: {self.get('clf_train', 'hybrid_loss')}")
        if self.get("hybrids", "mixer") not in MIXERS:
            raise ConfigError(f"unknown hybrids.mixer: {self.get('hybrids', 'mixer')}")
        if (self.get("clf_train", "hybrid_loss") == "contradict"
                and not 0.5 < self.get("clf_train", "alpha") <= 1.0):
            raise ConfigError("clf_train.alpha must be in (0.5, 1] for the contradict loss")
        return self

    def canonical(self):
        lines = []
        for section in sorted(self._values):
            for key in sorted(self._values[section]):
                val = self._values[section][key]
                if isinstance(val, float):
                    val = repr(val)
                lines.append(f"{section}.{key}={val}")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def protocol_hash(self):
        """Hash of the leakage-relevant sections only (data + split), so a
        generator checkpoint can be reused across classifier settings that
        share the same data protocol.
        """
        lines = [l for l in self.canonical().splitlines()
                 if l.startswith(("data.", "split."))]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def dump(self, path):
        lines = []
        for section in self._values:
            lines.append(f"[{section}]")
            for key, val in self._values[section].items():
                lines.append(f"{key} = {val}")
            lines.append("")
        with open(path, "w") as f:
            f.write("\n".join(lines))

    @classmethod
    def load(cls, path):
        cfg = cls()
        section = None
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1]
                    if section not in SCHEMA:
                        raise ConfigError(f"unknown config section: {section}")
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                if section is None:
                    raise ConfigError(f"{path}:{lineno}: key outside any [section]")
                key, _, val = line.partition("=")
                cfg.set(section, key.strip(), val.strip())
        return cfg.validate()

    @classmethod
    def from_overrides(cls, overrides):
        """Build from 'section.key=value' strings (CLI --set)."""
        cfg = cls()
        for item in overrides:
            dotted, _, val = item.partition("=")
            if not _ or "." not in dotted:
                raise ConfigError(f"override must be section.key=value, got {item!r}")
            section, _, key = dotted.partition(".")
            cfg.set(section.strip(), key.strip(), val.strip())
        return cfg.validate()
