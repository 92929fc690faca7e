import re
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import pandas as pd


@dataclass
class RequestAndFrameData:
    request_args: List[Tuple[str, str]]
    frame: pd.DataFrame


def create_request_and_frame_data(
    frame: pd.DataFrame,
    request_args: Iterable[Tuple[str, str]]
) -> RequestAndFrameData:

    return RequestAndFrameData(request_args=list(request_args), frame=frame)


def _column(frame: pd.DataFrame, name: str) -> pd.Series:
    if name not in frame.columns:
        raise ValueError(f"Unknown column: {name}")
    return frame[name].astype(str)


def like_to_regex(pattern: str) -> str:
    """SQL LIKE pattern (% and _ wildcards) as an anchored regular expression."""
    parts = []
    for char in pattern:
        if char == "%":
            parts.append(".*")
        elif char == "_":
            parts.append(".")
        else:
            parts.append(re.escape(char))
    return "^" + "".join(parts) + "$"


def apply_request_args_to_frame_filter(data: RequestAndFrameData) -> RequestAndFrameData:

    result = RequestAndFrameData(request_args=[], frame=data.frame)

    for key, value in data.request_args:
        key_parts = key.split(".")

        if len(key_parts) == 1:
            column = _column(result.frame, key)
            result.frame = result.frame[column == value]

        elif len(key_parts) == 2 and len(key_parts[0]) > 0:
            column = _column(result.frame, key_parts[0])
            operator = key_parts[1]

            if operator == "like":
                result.frame = result.frame[column.str.match(like_to_regex(value))]
            elif operator == "startswith":
                result.frame = result.frame[column.str.startswith(value)]
            else:
                result.request_args.append((key, value))

        else:
            result.request_args.append((key, value))

    return result


def apply_request_args_to_frame_order_by(data: RequestAndFrameData) -> RequestAndFrameData:

    result = RequestAndFrameData(request_args=[], frame=data.frame)

    for key, value in data.request_args:
        if key != ".order_by":
            result.request_args.append((key, value))
            continue

        columns, ascending = [], []
        for value_part in value.split(","):
            value_part_parts = value_part.split(" ")

            if len(value_part_parts) == 1:
                columns.append(value_part)
                ascending.append(True)

            elif len(value_part_parts) == 2 and value_part_parts[1].lower() in ("asc", "desc"):
                columns.append(value_part_parts[0])
                ascending.append(value_part_parts[1].lower() == "asc")

            else:
                result.request_args.append((key, value))
                columns = []
                break

        for column in columns:
            if column not in result.frame.columns:
                raise ValueError(f"Unknown column: {column}")
        if columns:
            result.frame = result.frame.sort_values(columns, ascending=ascending, kind="stable")

    return result


def apply_request_args_to_frame_offset_limit(data: RequestAndFrameData) -> RequestAndFrameData:

    result = RequestAndFrameData(request_args=[], frame=data.frame)
    offset, limit = 0, None

    for key, value in data.request_args:
        if key == ".offset":
            offset = int(value)
        elif key == ".limit":
            limit = int(value)
        else:
            result.request_args.append((key, value))

    if offset < 0 or (limit is not None and limit < 0):
        raise ValueError("offset and limit must not be negative")
    stop = None if limit is None else offset + limit
    result.frame = result.frame.iloc[offset:stop]
    return result


def ensure_no_request_args_left(data: RequestAndFrameData) -> None:
    if len(data.request_args) > 0:
        raise ValueError(f"Unsupported request args: {data.request_args}")


def select_rows_from_request_args(
    frame: pd.DataFrame,
    request_args: Iterable[Tuple[str, str]]
) -> pd.DataFrame:

    data = create_request_and_frame_data(frame, request_args)
    data = apply_request_args_to_frame_filter(data)
    data = apply_request_args_to_frame_order_by(data)
    data = apply_request_args_to_frame_offset_limit(data)
    ensure_no_request_args_left(data)

    return data.frame
