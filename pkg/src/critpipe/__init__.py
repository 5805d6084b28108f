"""critpipe: actor/critic pipelines for critique data synthesis, test-time
supervision, and critique-in-the-loop self-improvement."""

from .backends import (
    Gateway,
    GenerationRequest,
    HttpChatBackend,
    ScriptedBackend,
    SimulatedWorld,
    StochasticActorSpec,
    StochasticCriticSpec,
    prompt_fingerprint,
    simulate_critique,
    simulate_refinement,
    single_round_accuracy,
)
from .core import (
    Critique,
    GenParams,
    InteractionHistory,
    Message,
    Query,
    ReasoningPath,
    RefinementRecord,
    Step,
    append_round,
    context_view,
    split_steps,
)
from .critiques import (
    CritiqueCandidate,
    FilterVerdict,
    critique_holistic,
    critique_incremental,
    decide_retention,
    emit_dataset,
    mc_filter,
    validate_correct_path_critique,
)
from .flaws import FlawRecord, rg1_sample, rg2_error_location, rg3_inject_mistake
from .grading import Answer, canonicalize, equivalent, extract_final_answer, reward
from .selfimprove import (
    IterationLedger,
    LoopConfig,
    assemble_training_set,
    explore,
    invoke_trainer,
    run_loop,
    tail_narrowing_report,
)
from .selftalk import ThinkingChain, interleave_feedback, iterate_until_clean, smooth, verify_and_store
from .testtime import (
    EvalReport,
    ProtocolConfig,
    difficulty_bucket,
    evaluate,
    maj_at_k,
    pass_at_k,
    run_protocol,
)

__version__ = "0.1.0"
