# Copyright (C) 2026 Jean Paul Fernandez
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.


class PromptAdapterError(Exception):
    """Base class for every error raised by the library. `code` is stable."""

    code = "error"

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Machine-parseable single line: `error: <code>: <message>`."""
        flat = " ".join(str(self.message).split())
        return f"error: {self.code}: {flat}"


class ShapeError(PromptAdapterError):
    code = "shape_error"


class ContractError(PromptAdapterError):
    code = "contract_error"


class NumericalError(PromptAdapterError):
    code = "numerical_error"


class ConfigurationError(PromptAdapterError):
    code = "configuration_error"


class GenerationError(PromptAdapterError):
    code = "generation_error"


class RegenerationSignal(PromptAdapterError):
    """The requested task cannot be asked about this scene; retry with the next seed."""

    code = "regenerate"


class ConfigMismatchError(PromptAdapterError):
    code = "config_mismatch"


class NoAttentionArtifactsError(PromptAdapterError):
    code = "no_attention_artifacts"


class RunFailedError(PromptAdapterError):
    code = "run_failed"
