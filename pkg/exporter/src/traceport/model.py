"""Checkpoint loading and feature extraction points.

Detectors are expected to follow the common torch convention: called with a
float image batch of shape (B, C, H, W), they return one dict per image with
at least "boxes" (n, 4), "scores" (n,) and "labels" (n,) tensors.

Features for each detection come from one of two places, named by a feature
point string:

  "output.<key>"    each per-image output dict carries an (n_i, d) tensor
                    under <key>, aligned row for row with that image's boxes.
  "module:<name>"   a forward hook on the named submodule captures its output
                    once per model call; it must be a (sum n_i, d) tensor for
                    the whole batch and is split back per image by detection
                    counts. Hooks only attach to eager modules, so this route
                    needs a pickled checkpoint, not a TorchScript archive.

Anything that does not match those shapes fails fast rather than writing a
misaligned trace.
"""

from pathlib import Path

import torch

from .errors import ExportDataError, ExportUsageError


def load_detector(checkpoint: str | Path, device: torch.device) -> torch.nn.Module:
    """Load a TorchScript archive or a pickled module and put it in eval mode."""
    path = Path(checkpoint)
    if not path.is_file():
        raise ExportDataError(f"checkpoint {path} does not exist")
    try:
        model = torch.jit.load(str(path), map_location=device)
    except RuntimeError:
        try:
            model = torch.load(path, map_location=device, weights_only=False)
        except Exception as exc:
            raise ExportDataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(model, torch.nn.Module):
        raise ExportDataError(
            f"checkpoint {path} does not contain a torch module "
            f"(got {type(model).__name__}); bare state dicts are not runnable"
        )
    model.to(device)
    model.eval()
    return model


class FeaturePoint:
    """Parsed feature point selector."""

    def __init__(self, spec: str):
        if spec.startswith("output."):
            self.kind = "output"
            self.name = spec[len("output.") :]
        elif spec.startswith("module:"):
            self.kind = "module"
            self.name = spec[len("module:") :]
        else:
            raise ExportUsageError(
                f"feature point {spec!r} must look like 'output.<key>' or 'module:<name>'"
            )
        if not self.name:
            raise ExportUsageError(f"feature point {spec!r} names nothing")
        self.spec = spec


class HookCapture:
    """Forward hook on a named submodule, capturing its output per model call.

    Use as a context manager around the inference loop; call take() after each
    model invocation to pop the captured tensor.
    """

    def __init__(self, model: torch.nn.Module, module_name: str):
        self._outputs: list[torch.Tensor] = []
        self._module_name = module_name
        target = dict(model.named_modules()).get(module_name)
        if target is None:
            available = sorted(name for name, _ in model.named_modules() if name)
            raise ExportUsageError(
                f"model has no submodule named {module_name!r}; "
                f"available: {', '.join(available) or '(none)'}"
            )
        self._target = target
        self._handle = None

    def __enter__(self):
        try:
            self._handle = self._target.register_forward_hook(self._record)
        except RuntimeError as exc:
            # torch.jit.load gives ScriptModules, which refuse runtime hooks
            raise ExportUsageError(
                f"cannot hook submodule {self._module_name!r}: {exc}; TorchScript "
                "archives do not accept hooks, so use an 'output.<key>' feature "
                "point or export from a pickled eager checkpoint"
            ) from exc
        return self

    def __exit__(self, *exc_info):
        if self._handle is not None:
            self._handle.remove()
            self._handle = None
        return False

    def _record(self, module, inputs, output):
        self._outputs.append(output)

    def take(self) -> torch.Tensor:
        """Pop the single capture recorded by the last model call."""
        if len(self._outputs) != 1:
            raise ExportDataError(
                f"submodule {self._module_name!r} fired {len(self._outputs)} times "
                "during one model call; feature hooks need exactly one firing"
            )
        out = self._outputs.pop()
        if not isinstance(out, torch.Tensor):
            raise ExportDataError(
                f"submodule {self._module_name!r} produced {type(out).__name__}, "
                "expected a feature tensor"
            )
        return out
