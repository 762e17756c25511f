"""Published scores, used only to annotate reports.

Instruction-tuned 70B/123B models and fine-tuned baselines; none of these are
reproduced by the toolchain.
"""
from types import MappingProxyType

_INSTRUCTION_TUNING = {
    "Llama Base": {"A-SAD": 0.594, "T-SAD": 0.558, "S-NAP": 0.525, "S-DFD": 0.630, "S-PTD": 0.621},
    "Llama IT": {"A-SAD": 0.562, "T-SAD": 0.480, "S-NAP": 0.651, "S-DFD": 0.714, "S-PTD": 0.697},
    "Mistral Base": {"A-SAD": 0.421, "T-SAD": 0.347, "S-NAP": 0.624, "S-DFD": 0.658, "S-PTD": 0.649},
    "Mistral IT": {"A-SAD": 0.679, "T-SAD": 0.620, "S-NAP": 0.868, "S-DFD": 0.770, "S-PTD": 0.763},
}

_FINE_TUNED = {
    "RoBERTa FT": {"T-SAD": 0.77, "A-SAD": 0.85, "S-NAP": 0.63},
    "Mistral 7B FT": {"T-SAD": 0.79, "A-SAD": 0.88, "S-NAP": 0.68, "S-DFD": 0.81, "S-PTD": 0.84},
    "Llama 8B FT": {"T-SAD": 0.79, "A-SAD": 0.88, "S-NAP": 0.69, "S-DFD": 0.80, "S-PTD": 0.83},
}

REFERENCE_TABLE = MappingProxyType(
    {model: MappingProxyType(scores) for model, scores in {**_INSTRUCTION_TUNING, **_FINE_TUNED}.items()}
)
REFERENCE_MODELS = tuple(REFERENCE_TABLE)


def reference_scores(task: str) -> dict[str, float]:
    return {model: scores[task] for model, scores in REFERENCE_TABLE.items() if task in scores}
