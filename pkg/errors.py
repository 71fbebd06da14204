# errors.py

class CycleDanceError(Exception):
    """所有项目异常的基类。"""

    exit_code = 1


class ValidationError(CycleDanceError, ValueError):
    """输入不合法：形状、宽度、取值范围、文件内容。"""

    exit_code = 2


class ShapeError(ValidationError):
    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: shape mismatch {joined}")


class NumericError(CycleDanceError, ArithmeticError):
    """出现 NaN/Inf。"""

    exit_code = 3
