import trace_decline.artifacts
import trace_decline.go_lexer
import trace_decline.repo_model
import trace_decline.corpus_utils
import trace_decline.llm_gateway
import trace_decline.pipeline
import trace_decline.text_utils
import trace_decline.baseline
import trace_decline.scorers
import trace_decline.stat_utils
import trace_decline.reporters
import trace_decline.arg_utils
import trace_decline.config
import trace_decline.version_info

__version__ = trace_decline.version_info.__version__
