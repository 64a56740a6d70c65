"""Prompt construction, chat-completion client and explanation parsing."""

from .client import (
    API_KEY_ENV,
    ChatResult,
    ExplanationFailure,
    LlmClient,
    LlmClientConfig,
    LlmConfigurationError,
    LlmRequestError,
    LlmTransportError,
    RetryPolicy,
    explain_many,
)
from .mock import MockBackend
from .parsing import ExplanationParseError, ExplanationReport, canonical_target, parse_explanation
from .prompts import (
    BudgetError,
    FewShotExample,
    PromptBundle,
    QueryMisuseError,
    build_bundle,
    build_query,
    build_system_prompt,
    estimate_tokens,
    gold_answer,
    select_few_shots,
)
