"""Config files: [section] headers with key = value lines, parsed by
configparser. Every knob has a default; a config file only overrides."""

from __future__ import annotations

import configparser
import io

from .autoencoder import AEConfig
from .atlas import DiffDefConfig
from .errors import ArgumentError
from .registration import RegConfig

DEFAULTS = {
    "phantom": {
        "n": "200",
        "mode": "uniform",
        "excluded": "",
        "gap": "0.03",
        "grid": "64",
        "radii_lo": "20.0",
        "radii_hi": "26.0",
        "amplitude": "2.5",
        "noise_sigma": "0.01",
    },
    "autoencoder": {
        "latent_channels": "4",
        "kl_weight": "1e-8",
        "lr": "5e-5",
        "epochs": "30",
    },
    "diffusion": {
        "timesteps": "1000",
        "beta_start": "1e-4",
        "beta_end": "2e-2",
    },
    "registration": {
        "similarity": "ncc",
        "window": "9",
        "reg_weight": "0.1",
        "levels": "4",
        "iters_per_level": "100",
        "lr": "0.1",
        "net_lr": "3e-3",
        "net_epochs": "100",
        "net_batch": "8",
    },
    "diffdef": {
        "alpha": "1.0",
        "beta": "0.5",
        "n_neighbors": "15",
        "sigma": "0.05",
        "epochs": "30",
        "lr": "2.5e-5",
        "inference_steps": "500",
    },
}


def _parser_with_defaults():
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None):
    """Parse a config file over the defaults; returns the ConfigParser."""
    cp = _parser_with_defaults()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ArgumentError(f"config file not found: {path}")
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ArgumentError(f"unknown config section [{section}]")
            for key in cp[section]:
                if key not in DEFAULTS[section]:
                    raise ArgumentError(f"unknown key {key!r} in [{section}]")
    return cp


def sample_config_text():
    cp = _parser_with_defaults()
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_snapshot(cp):
    return {s: dict(cp[s]) for s in cp.sections()}


def ae_config(cp, grid_shape=None):
    sec = cp["autoencoder"]
    ch = sec.getint("latent_channels")
    if grid_shape is None:
        shape = (ch, 16, 16)
    else:
        shape = (ch, grid_shape[0] // 4, grid_shape[1] // 4)
    return AEConfig(latent_shape=shape, kl_weight=sec.getfloat("kl_weight"),
                    lr=sec.getfloat("lr"), epochs=sec.getint("epochs"))


def reg_config(cp):
    sec = cp["registration"]
    return RegConfig(similarity=sec.get("similarity"), window=sec.getint("window"),
                     reg_weight=sec.getfloat("reg_weight"), levels=sec.getint("levels"),
                     iters_per_level=sec.getint("iters_per_level"),
                     lr=sec.getfloat("lr"), net_lr=sec.getfloat("net_lr"),
                     net_epochs=sec.getint("net_epochs"),
                     net_batch=sec.getint("net_batch"))


def diffdef_config(cp):
    sec = cp["diffdef"]
    return DiffDefConfig(alpha=sec.getfloat("alpha"), beta=sec.getfloat("beta"),
                         n_neighbors=sec.getint("n_neighbors"),
                         sigma=sec.getfloat("sigma"), epochs=sec.getint("epochs"),
                         lr=sec.getfloat("lr"),
                         inference_steps=sec.getint("inference_steps"))


def diffusion_kwargs(cp):
    sec = cp["diffusion"]
    return {"T": sec.getint("timesteps"), "beta_start": sec.getfloat("beta_start"),
            "beta_end": sec.getfloat("beta_end")}


def phantom_kwargs(cp):
    sec = cp["phantom"]
    excluded = [float(v) for v in sec.get("excluded").split(",") if v.strip()]
    return {"n": sec.getint("n"), "mode": sec.get("mode"), "excluded": excluded,
            "gap": sec.getfloat("gap"), "grid": sec.getint("grid"),
            "radii_range": (sec.getfloat("radii_lo"), sec.getfloat("radii_hi")),
            "warp_amplitude": sec.getfloat("amplitude"),
            "noise_sigma": sec.getfloat("noise_sigma")}
