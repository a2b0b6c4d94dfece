"""skillforge: bi-level skill evolution for LLM context engineering.

A meta-agent evolves skills (folders of instructions and scripts); a
base-agent executes them to learn task context as files plus an executable
retrieval program; a history-informed (1+1) evolution strategy keeps the
artifact with the best validation score.
"""

__version__ = "0.1.0"
