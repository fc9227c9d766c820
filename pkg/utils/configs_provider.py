from functools import cached_property

from exprag.llm import PromptLibrary
from exprag.segmenter import HeaderTable
from utils.configs import GlobalConfig, MlflowLoggerConfig, YamlBaseModel
from utils.singleton import SingletonMeta


def _default_or_file[T: YamlBaseModel](config_class: type[T]) -> T:
    path = config_class.DEFAULT_CONFIG_PATH
    if path is not None and path.exists():
        return config_class.from_yaml()
    return config_class()


class ConfigProvider(metaclass=SingletonMeta):
    """Singleton class to provide configs for the application.

    Each config is loaded lazily on first access and cached, so a missing or
    invalid file for one config does not break access to the others. Header
    and prompt tables fall back to their built-in defaults when their file is
    absent.
    """

    @cached_property
    def global_config(self) -> GlobalConfig:
        """Global configuration settings."""
        return GlobalConfig()

    @cached_property
    def headers(self) -> HeaderTable:
        return _default_or_file(HeaderTable)

    @cached_property
    def prompts(self) -> PromptLibrary:
        return _default_or_file(PromptLibrary)

    @cached_property
    def mlflow_configs(self) -> MlflowLoggerConfig:
        """MLflow logger configuration settings, loaded from the default file."""
        return MlflowLoggerConfig.from_yaml()
