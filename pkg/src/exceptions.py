"""Error hierarchy shared by services and the command line"""


class CTAError(Exception):
    """Base error; `kind` and `exit_code` drive the CLI error line"""
    kind = 'runtime'
    exit_code = 4


class ConfigError(CTAError):
    kind = 'config'
    exit_code = 2


class MissingArtifactError(CTAError):
    kind = 'missing_artifact'
    exit_code = 3

    def __init__(self, artifact: str):
        super().__init__(f"missing artifact: {artifact}")
        self.artifact = artifact


class TrainingFailedError(CTAError):
    kind = 'training_failed'

    def __init__(self, metric: str, value: float, gate: float):
        super().__init__(f"training failed: {metric}={value:.4f} below gate {gate:.2f}")
        self.metric = metric
        self.value = value
        self.gate = gate


class NonFiniteError(CTAError):
    kind = 'non_finite'

    def __init__(self, what: str, epoch: int = -1, batch: int = -1):
        context = f" (epoch {epoch}, batch {batch})" if epoch >= 0 else ""
        super().__init__(f"non-finite {what}{context}")
        self.epoch = epoch
        self.batch = batch


class FrozenModelError(CTAError):
    kind = 'frozen_model_changed'
