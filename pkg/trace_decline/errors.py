"""Exceptions raised across trace_decline.

Every class subclasses the closest builtin, so code that already catches
ValueError/IOError/RuntimeError keeps working.
"""


class MalformedId(ValueError):
  pass


class ParseError(ValueError):
  """Raised when an input file cannot be parsed.

  Args:
    message: Human readable description
    path: The file (or artifact id) being parsed
    line: The 1-based line number of the last good line, if known
  """
  def __init__(self, message, path=None, line=None):
    super().__init__(message)
    self.path = path
    self.line = line


class ValidationError(ValueError):
  pass


class UnknownArtifact(ValueError):
  pass


class KindMismatch(ValueError):
  pass


class EmptyInput(ValueError):
  pass


class ShapeError(ValueError):
  pass


class DegenerateMarginals(ValueError):
  pass


class DegenerateInput(ValueError):
  pass


class MissingLabel(ValueError):
  def __init__(self, proposal_id):
    super().__init__(f'No label for proposal {proposal_id}')
    self.proposal_id = proposal_id


class EmptyIndex(ValueError):
  pass


class ConfigError(ValueError):
  pass


class MalformedModelOutput(ValueError):
  """Raised when every attempt to get a parseable reply failed.

  Args:
    message: Human readable description
    raw_replies: The raw completion texts, one per attempt
    scope: Optional artifact id the failure is limited to
  """
  def __init__(self, message, raw_replies=(), scope=None):
    super().__init__(message)
    self.raw_replies = list(raw_replies)
    self.scope = scope


class IoError(IOError):
  pass


class GatewayError(RuntimeError):
  pass


class CacheMiss(GatewayError):
  def __init__(self, fingerprint):
    super().__init__(f'No recorded completion for fingerprint {fingerprint}')
    self.fingerprint = fingerprint


class TransportError(GatewayError):
  pass


class ApiError(GatewayError):
  def __init__(self, status, body=''):
    super().__init__(f'Endpoint returned HTTP {status}: {body[:200]}')
    self.status = status
    self.body = body


class PromptTooLarge(GatewayError):
  def __init__(self, estimate, budget):
    super().__init__(f'Estimated prompt size {estimate} tokens exceeds the budget of {budget}')
    self.estimate = estimate
    self.budget = budget
