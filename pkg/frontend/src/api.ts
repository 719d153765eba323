/** Typed client for the session REST API. */

import type { CsrMask } from "./csr.js";

export type Prompt =
  | { type: "click"; row: number; col: number; positive: boolean }
  | { type: "box"; row_min: number; col_min: number; row_max: number; col_max: number }
  | { type: "text"; category_id: number };

export interface PredictionResponse {
  mask: CsrMask | null;
  confidence: number | null;
  dice: number | null;
  round: number;
}

export interface SessionState {
  session_id: string;
  height: number;
  width: number;
  prompts: Prompt[];
  mask: CsrMask | null;
  confidence: number | null;
  dice_trace: number[];
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function expectJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class SessionApi {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  async createSession(imageB64: string, gt?: CsrMask): Promise<{ session_id: string; height: number; width: number }> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ image_b64: imageB64, gt: gt ?? null }),
    });
    return expectJson(response);
  }

  async addPrompt(sessionId: string, prompt: Prompt): Promise<PredictionResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/prompts`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(prompt),
    });
    return expectJson(response);
  }

  async undo(sessionId: string): Promise<PredictionResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/undo`, {
      method: "POST",
    });
    return expectJson(response);
  }

  async getState(sessionId: string): Promise<SessionState> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`);
    return expectJson(response);
  }

  async categories(): Promise<Record<string, string>> {
    const response = await this.fetchFn(`${this.baseUrl}/categories`);
    return expectJson(response);
  }
}
