import type { GenerationView, PromptEntry, RunReport } from '../src/api.js';

export function makeGen(no: number, overrides: Partial<GenerationView> = {}): GenerationView {
  return {
    generation_id: `synth:alpha:${no}:a0`,
    dataset_id: 'synth',
    class_id: 'alpha',
    prompt_no: no,
    prompt_text: `a photo of alpha ${no}`,
    seed: 1000 + no,
    guidance_scale: 7.5,
    num_inference_steps: 30,
    width: 64,
    height: 64,
    status: 'done',
    output_path: `synth/alpha/${no}.png`,
    attempt: 0,
    parent_id: null,
    error: null,
    flag_category: null,
    flag_note: null,
    flag_reviewer: null,
    created_at: 0,
    image_url: `/images/coarse_to_fine/synth/alpha/${no}.png`,
    ...overrides,
  };
}

export function makePrompt(no: number, overrides: Partial<PromptEntry> = {}): PromptEntry {
  const text = `a photo of alpha ${no}`;
  return {
    no,
    text,
    status: 'unreviewed',
    replacement_text: null,
    note: null,
    effective_text: overrides.replacement_text ?? text,
    ...overrides,
  };
}

export function makeReport(overall: number, macro: number, sources: Record<string, number>): RunReport {
  const prototypes: RunReport['prototypes'] = {};
  for (const [classId, count] of Object.entries(sources)) {
    prototypes[classId] = { source_count: count, excluded: [] };
  }
  return {
    overall,
    macro,
    per_class: Object.fromEntries(Object.keys(sources).map((c) => [c, overall])),
    n_classes: Object.keys(sources).length,
    score_digest: 'feedc0de',
    prototypes,
    deficits: {},
    baseline: null,
    errors: {
      prompt_errors: 0,
      image_errors: 0,
      deduplicated_total: 0,
      category_counts: {},
      category_ratios: {},
    },
  };
}

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

type Responder = (call: RecordedCall) => { status?: number; payload: unknown } | undefined;

/**
 * Stand-in for fetch. Route functions get tried in order; the first
 * one that answers wins. Unmatched requests fail the test loudly.
 */
export class FakeFetch {
  calls: RecordedCall[] = [];
  private routes: Responder[] = [];

  route(fn: Responder): void {
    this.routes.push(fn);
  }

  handler = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    const method = (init?.method ?? 'GET').toUpperCase();
    const body = init?.body ? JSON.parse(String(init.body)) : null;
    const call: RecordedCall = { url, method, body };
    this.calls.push(call);
    for (const route of this.routes) {
      const hit = route(call);
      if (hit) {
        const status = hit.status ?? 200;
        return {
          ok: status < 400,
          status,
          statusText: String(status),
          json: async () => hit.payload,
        } as Response;
      }
    }
    throw new Error(`unrouted request: ${method} ${url}`);
  };
}
