"""Pydantic request/response models for the session service wire format.

Masks travel as CSR payloads {height, width, row_ptr, col_idx}; coordinates
are image-space (row, col) integers, consistent with the rest of the toolkit.
"""
from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, Field

from .. import storage
from ..maskcore import BBox, BinaryMask
from ..proposer import Box, Click, Prompt, TextPrompt


class CsrMask(BaseModel):
    height: int
    width: int
    row_ptr: list[int]
    col_idx: list[int]

    @classmethod
    def from_mask(cls, mask: BinaryMask) -> "CsrMask":
        row_ptr, col_idx = storage.encode_csr(mask)
        return cls(
            height=mask.height,
            width=mask.width,
            row_ptr=row_ptr.tolist(),
            col_idx=col_idx.tolist(),
        )

    def to_mask(self) -> BinaryMask:
        return storage.decode_csr(self.height, self.width, self.row_ptr, self.col_idx)


class CreateSessionRequest(BaseModel):
    image_b64: str = Field(description="base64-encoded PNG image")
    gt: CsrMask | None = Field(default=None, description="optional GT for live Dice")


class CreateSessionResponse(BaseModel):
    session_id: str
    height: int
    width: int


class ClickPromptModel(BaseModel):
    type: Literal["click"] = "click"
    row: int
    col: int
    positive: bool = True


class BoxPromptModel(BaseModel):
    type: Literal["box"] = "box"
    row_min: int
    col_min: int
    row_max: int
    col_max: int


class TextPromptModel(BaseModel):
    type: Literal["text"] = "text"
    category_id: int


PromptModel = Annotated[
    Union[ClickPromptModel, BoxPromptModel, TextPromptModel], Field(discriminator="type")
]


def to_prompt(model: ClickPromptModel | BoxPromptModel | TextPromptModel) -> Prompt:
    if isinstance(model, ClickPromptModel):
        return Click(model.row, model.col, model.positive)
    if isinstance(model, BoxPromptModel):
        return Box(BBox(model.row_min, model.col_min, model.row_max, model.col_max))
    return TextPrompt(model.category_id)


def from_prompt(prompt: Prompt) -> ClickPromptModel | BoxPromptModel | TextPromptModel:
    if isinstance(prompt, Click):
        return ClickPromptModel(row=prompt.row, col=prompt.col, positive=prompt.positive)
    if isinstance(prompt, Box):
        b = prompt.bbox
        return BoxPromptModel(
            row_min=b.row_min, col_min=b.col_min, row_max=b.row_max, col_max=b.col_max
        )
    return TextPromptModel(category_id=prompt.category_id)


class PredictionResponse(BaseModel):
    mask: CsrMask | None
    confidence: float | None
    dice: float | None = None
    round: int


class SessionState(BaseModel):
    session_id: str
    height: int
    width: int
    prompts: list[PromptModel]
    mask: CsrMask | None
    confidence: float | None
    dice_trace: list[float]
    created_at: float
    last_touched: float
