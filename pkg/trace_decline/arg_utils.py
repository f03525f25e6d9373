def parse_profile(profile):
  kargs = {}
  try:
    for kv in profile.split(','):
      k, v = kv.split('=', 1)
      kargs[k.strip()] = v.strip()
  except ValueError:
    # more informative error message
    raise ValueError(
      f"Failed to parse profile: {profile}. The expected format is:"
      " \"key1=value1,key2=value2,[...]\""
    )
  return kargs


def parse_value(s):
  """Interpret an override value: int, float, true/false/null, a ";"-separated list, or text."""
  if ';' in s:
    return [parse_value(x.strip()) for x in s.split(';') if x.strip()]
  lowered = s.lower()
  if lowered in ('true', 'false'):
    return lowered == 'true'
  if lowered in ('null', 'none'):
    return None
  try:
    return parse_intfloat(s)
  except ValueError:
    return s


def parse_intfloat(s):
  try:
    return int(s)
  except ValueError:
    return float(s)


def parse_int_list(s):
  """Parse "1;5;10" or "1 5 10" into a list of ints."""
  try:
    return [int(x) for x in s.replace(';', ' ').replace(',', ' ').split()]
  except ValueError:
    raise ValueError(f'Failed to parse integer list: {s}. The expected format is: "1;5;10"')


def parse_id_list(s):
  return set(parse_int_list(s)) if s else None
