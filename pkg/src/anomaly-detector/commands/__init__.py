from .command_registry import COMMANDS, register_all_commands

__all__ = ["COMMANDS", "register_all_commands"]
