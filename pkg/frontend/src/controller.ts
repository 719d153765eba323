/**
 * Session controller: owns the prompt history mirror, the decoded overlay,
 * and the Dice trace. The UI is stateless beyond the session id — hydrate()
 * rebuilds the identical view from GET /sessions/{id}.
 *
 * Requests are strictly serialized: one in flight per session, later inputs
 * queue behind it, matching the service's per-session ordering.
 */

import { SessionApi, type Prompt, type PredictionResponse } from "./api.js";
import { decodeCsr, encodeCsr, type CsrMask } from "./csr.js";

export interface ViewState {
  sessionId: string | null;
  height: number;
  width: number;
  prompts: Prompt[];
  maskPayload: CsrMask | null;
  maskBits: Uint8Array | null;
  confidence: number | null;
  diceTrace: number[];
  busy: boolean;
  error: string | null;
}

export class SessionController {
  private state: ViewState = {
    sessionId: null,
    height: 0,
    width: 0,
    prompts: [],
    maskPayload: null,
    maskBits: null,
    confidence: null,
    diceTrace: [],
    busy: false,
    error: null,
  };
  private queue: Promise<unknown> = Promise.resolve();
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(private api: SessionApi) {}

  onUpdate(listener: (s: ViewState) => void): void {
    this.listeners.push(listener);
  }

  view(): ViewState {
    return { ...this.state, prompts: [...this.state.prompts] };
  }

  private emit(): void {
    const snapshot = this.view();
    for (const listener of this.listeners) listener(snapshot);
  }

  /** Chain a task so session requests never overlap. */
  private enqueue<T>(task: () => Promise<T>): Promise<T> {
    const next = this.queue.then(async () => {
      this.state.busy = true;
      this.state.error = null;
      this.emit();
      try {
        return await task();
      } catch (err) {
        this.state.error = err instanceof Error ? err.message : String(err);
        throw err;
      } finally {
        this.state.busy = false;
        this.emit();
      }
    });
    this.queue = next.catch(() => undefined);
    return next;
  }

  create(imageB64: string, height: number, width: number, gt?: CsrMask): Promise<void> {
    return this.enqueue(async () => {
      const created = await this.api.createSession(imageB64, gt);
      this.state = {
        ...this.state,
        sessionId: created.session_id,
        height: created.height,
        width: created.width,
        prompts: [],
        maskPayload: null,
        maskBits: null,
        confidence: null,
        diceTrace: [],
      };
    });
  }

  private applyPrediction(prompt: Prompt | null, prediction: PredictionResponse): void {
    if (prompt !== null) {
      this.state.prompts.push(prompt);
    } else {
      this.state.prompts.pop();
    }
    this.state.maskPayload = prediction.mask;
    this.state.maskBits = prediction.mask ? decodeCsr(prediction.mask) : null;
    this.state.confidence = prediction.confidence;
    if (prediction.dice !== null) {
      if (prompt !== null) this.state.diceTrace.push(prediction.dice);
      else this.state.diceTrace.pop();
    } else if (prompt === null) {
      this.state.diceTrace.pop();
    }
  }

  sendPrompt(prompt: Prompt): Promise<void> {
    return this.enqueue(async () => {
      const sid = this.requireSession();
      const prediction = await this.api.addPrompt(sid, prompt);
      this.applyPrediction(prompt, prediction);
    });
  }

  undo(): Promise<void> {
    return this.enqueue(async () => {
      const sid = this.requireSession();
      const prediction = await this.api.undo(sid);
      this.applyPrediction(null, prediction);
    });
  }

  /** Rebuild the full view from the server snapshot (page reload path). */
  hydrate(sessionId: string): Promise<void> {
    return this.enqueue(async () => {
      const snapshot = await this.api.getState(sessionId);
      this.state = {
        ...this.state,
        sessionId: snapshot.session_id,
        height: snapshot.height,
        width: snapshot.width,
        prompts: snapshot.prompts,
        maskPayload: snapshot.mask,
        maskBits: snapshot.mask ? decodeCsr(snapshot.mask) : null,
        confidence: snapshot.confidence,
        diceTrace: snapshot.dice_trace,
      };
    });
  }

  /** Current mask as a CSR JSON document (the export button payload). */
  exportMask(): string {
    if (this.state.maskBits === null) throw new Error("no mask to export");
    const payload = encodeCsr(this.state.maskBits, this.state.height, this.state.width);
    return JSON.stringify(payload);
  }

  private requireSession(): string {
    if (this.state.sessionId === null) throw new Error("no active session");
    return this.state.sessionId;
  }
}
