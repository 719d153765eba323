/**
 * Browser entry point: wires the canvas, prompt controls, history panel,
 * and Dice sparkline to a SessionController. Pure logic lives in the
 * sibling modules; this file only touches the DOM.
 */

import { SessionApi, type Prompt } from "./api.js";
import { SessionController, type ViewState } from "./controller.js";
import { gestureToPrompt, toImagePoint, type ImagePoint } from "./gestures.js";
import { maskToRgba } from "./overlay.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function promptLabel(p: Prompt): string {
  if (p.type === "click") return `${p.positive ? "+" : "−"} click (${p.row}, ${p.col})`;
  if (p.type === "box") return `box (${p.row_min}, ${p.col_min})–(${p.row_max}, ${p.col_max})`;
  return `text #${p.category_id}`;
}

function drawSparkline(canvas: HTMLCanvasElement, trace: number[]): void {
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (trace.length === 0) return;
  ctx.strokeStyle = "#4287f5";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  const step = trace.length > 1 ? canvas.width / (trace.length - 1) : 0;
  trace.forEach((d, i) => {
    const x = trace.length > 1 ? i * step : canvas.width / 2;
    const y = canvas.height - 2 - d * (canvas.height - 4);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

export function initApp(): void {
  const api = new SessionApi("");
  const controller = new SessionController(api);

  const canvas = el<HTMLCanvasElement>("canvas");
  const fileInput = el<HTMLInputElement>("file");
  const negToggle = el<HTMLInputElement>("negative");
  const undoButton = el<HTMLButtonElement>("undo");
  const exportButton = el<HTMLButtonElement>("export");
  const textInput = el<HTMLInputElement>("category");
  const textButton = el<HTMLButtonElement>("send-text");
  const historyList = el<HTMLUListElement>("history");
  const diceLabel = el<HTMLSpanElement>("dice");
  const status = el<HTMLSpanElement>("status");
  const sparkline = el<HTMLCanvasElement>("sparkline");
  const categoryList = el<HTMLDataListElement>("category-options");

  let image: ImageBitmap | null = null;
  let categoryIds: Record<string, number> = {};

  function render(state: ViewState): void {
    const ctx = canvas.getContext("2d")!;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (image) ctx.drawImage(image, 0, 0, canvas.width, canvas.height);
    if (state.maskBits && state.width > 0) {
      const rgba = maskToRgba(state.maskBits);
      const overlay = new ImageData(new Uint8ClampedArray(rgba), state.width, state.height);
      // draw the overlay at image resolution, then scale onto the view canvas
      const buffer = document.createElement("canvas");
      buffer.width = state.width;
      buffer.height = state.height;
      buffer.getContext("2d")!.putImageData(overlay, 0, 0);
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(buffer, 0, 0, canvas.width, canvas.height);
    }
    historyList.replaceChildren(
      ...state.prompts.map((p) => {
        const item = document.createElement("li");
        item.textContent = promptLabel(p);
        item.className = p.type === "click" ? (p.positive ? "pos" : "neg") : p.type;
        return item;
      }),
    );
    const dice = state.diceTrace[state.diceTrace.length - 1];
    diceLabel.textContent = dice !== undefined ? dice.toFixed(4) : "–";
    drawSparkline(sparkline, state.diceTrace);
    undoButton.disabled = state.busy || state.prompts.length === 0;
    exportButton.disabled = state.busy || state.maskBits === null;
    status.textContent = state.error ?? (state.busy ? "working…" : "ready");
    status.className = state.error ? "error" : "";
  }

  controller.onUpdate(render);

  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    const bytes = new Uint8Array(await file.arrayBuffer());
    let binary = "";
    bytes.forEach((b) => (binary += String.fromCharCode(b)));
    image = await createImageBitmap(file);
    canvas.width = image.width * Math.max(1, Math.floor(512 / image.width));
    canvas.height = image.height * Math.max(1, Math.floor(512 / image.height));
    try {
      await controller.create(btoa(binary), image.height, image.width);
      history.replaceState(null, "", `#${controller.view().sessionId}`);
    } catch {
      // error already surfaced through the controller state
    }
  });

  let downAt: ImagePoint | null = null;
  canvas.addEventListener("mousedown", (ev) => {
    if (controller.view().sessionId === null) return;
    const rect = canvas.getBoundingClientRect();
    const state = controller.view();
    downAt = toImagePoint(
      { x: ev.clientX - rect.left, y: ev.clientY - rect.top },
      rect.width,
      rect.height,
      state.width,
      state.height,
    );
  });
  canvas.addEventListener("mouseup", (ev) => {
    if (downAt === null) return;
    const rect = canvas.getBoundingClientRect();
    const state = controller.view();
    const upAt = toImagePoint(
      { x: ev.clientX - rect.left, y: ev.clientY - rect.top },
      rect.width,
      rect.height,
      state.width,
      state.height,
    );
    const negative = negToggle.checked || ev.button === 2;
    const prompt = gestureToPrompt(downAt, upAt, { negative });
    downAt = null;
    controller.sendPrompt(prompt).catch(() => undefined);
  });
  canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

  undoButton.addEventListener("click", () => {
    controller.undo().catch(() => undefined);
  });

  exportButton.addEventListener("click", () => {
    const blob = new Blob([controller.exportMask()], { type: "application/json" });
    const link = document.createElement("a");
    link.href = URL.createObjectURL(blob);
    link.download = "mask.csr.json";
    link.click();
    URL.revokeObjectURL(link.href);
  });

  textButton.addEventListener("click", () => {
    const name = textInput.value.trim();
    const id = categoryIds[name] ?? Number.parseInt(name, 10);
    if (Number.isNaN(id)) return;
    controller.sendPrompt({ type: "text", category_id: id }).catch(() => undefined);
  });

  api
    .categories()
    .then((table) => {
      categoryIds = Object.fromEntries(
        Object.entries(table).map(([id, name]) => [name, Number(id)]),
      );
      categoryList.replaceChildren(
        ...Object.values(table).map((name) => {
          const option = document.createElement("option");
          option.value = name;
          return option;
        }),
      );
    })
    .catch(() => undefined);

  // reloading with #<session-id> restores the identical view from the server
  const fromHash = window.location.hash.slice(1);
  if (fromHash) {
    controller.hydrate(fromHash).catch(() => undefined);
  }
  render(controller.view());
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  initApp();
}
