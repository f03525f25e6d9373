class Formatter(object):

    def __init__(self, decimals=6):
        self.set_decimals(decimals)

    def set_decimals(self, decimals):
        self.decimals = decimals

    def __call__(self, x):
        """Convert object to string with controlled decimals"""
        if x is None:
            return '-'
        elif isinstance(x, str):
            return x
        elif isinstance(x, bool):
            return 'yes' if x else 'no'
        elif isinstance(x, int):
            return f"{x:d}"
        elif isinstance(x, float):
            return f"{x:.{self.decimals}f}"
        else:
            return str(x)

fmt = Formatter(decimals=6)
