"""
Hierarquia de exceções do DEGM Lab.

Cada exceção também deriva do tipo builtin equivalente, de modo que quem
captura ``ValueError`` ou ``RuntimeError`` continua funcionando.
"""

from typing import Optional


class DegmError(Exception):
    """Exceção base de todo o pacote."""


class DimensionError(DegmError, ValueError):
    """Formas de tensores incompatíveis."""


class ContractError(DegmError, ValueError):
    """Pré-condição de uma operação violada."""


class StructuralError(DegmError, ValueError):
    """Estrutura do grafo inconsistente (dimensões latentes, índices de nós)."""


class ConfigError(DegmError, ValueError):
    """Configuração inválida; carrega o caminho da chave problemática."""

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.key_path = key_path
        prefix = f"{key_path}: " if key_path else ""
        super().__init__(f"{prefix}{message}")


class FormatError(DegmError, ValueError):
    """Arquivo IDX malformado; carrega o offset em bytes."""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class TrainingError(DegmError, RuntimeError):
    """Falha numérica durante o treino; carrega o nome do parâmetro."""

    def __init__(self, message: str, param_name: Optional[str] = None):
        self.param_name = param_name
        suffix = f" [parameter {param_name}]" if param_name else ""
        super().__init__(f"{message}{suffix}")


class CheckpointError(DegmError, IOError):
    """Checkpoint ausente ou corrompido."""
