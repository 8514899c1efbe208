// Typed client for the review service JSON API. Every mutation the UI
// performs goes through here; there is no other channel to the backend.

export type FlagCategory = 'wrong_category' | 'poor_composition';

export interface DatasetEntry {
  dataset_id: string;
}

export interface GenerationCounts {
  total: number;
  done: number;
  flagged: number;
  failed: number;
}

export interface ClassSummary {
  class_id: string;
  class_name: string;
  n_real_images: number;
  generations: GenerationCounts | null;
}

export interface PromptEntry {
  no: number;
  text: string;
  status: string;
  replacement_text: string | null;
  note: string | null;
  effective_text: string;
}

export interface PromptSetView {
  dataset_id: string;
  class_id: string;
  provider_id: string;
  deficient: boolean;
  gaps: number[];
  prompts: PromptEntry[];
}

export interface GenerationView {
  generation_id: string;
  dataset_id: string;
  class_id: string;
  prompt_no: number;
  prompt_text: string;
  seed: number;
  guidance_scale: number;
  num_inference_steps: number;
  width: number;
  height: number;
  status: string;
  output_path: string | null;
  attempt: number;
  parent_id: string | null;
  error: string | null;
  flag_category: FlagCategory | null;
  flag_note: string | null;
  flag_reviewer: string | null;
  created_at: number;
  image_url: string | null;
}

export interface GenerationListing {
  dataset_id: string;
  class_id: string;
  engine_id: string;
  generations: GenerationView[];
}

export interface PrototypeSummary {
  source_count: number;
  excluded: string[];
}

export interface ErrorSummary {
  prompt_errors: number;
  image_errors: number;
  deduplicated_total: number;
  category_counts: Record<string, number>;
  category_ratios: Record<string, number>;
}

export interface RunReport {
  overall: number;
  macro: number;
  per_class: Record<string, number>;
  n_classes: number;
  score_digest: string;
  prototypes: Record<string, PrototypeSummary>;
  deficits: Record<string, { expected: number; actual: number }>;
  baseline: unknown;
  errors: ErrorSummary;
}

export interface CalibrationDelta {
  uncorrected_run_id: string;
  calibrated_run_id: string;
  uncorrected_overall: number;
  calibrated_overall: number;
  delta_overall: number;
  uncorrected_macro: number;
  calibrated_macro: number;
  delta_macro: number;
}

export interface RunView {
  run_id: string;
  config: Record<string, unknown>;
  report: RunReport;
  calibration_delta: CalibrationDelta | null;
}

export interface RunRequest {
  dataset_id: string;
  backend_id: string;
  n_scales?: number;
  prompt_style?: string;
  multiscale_enabled?: boolean;
  calibration_applied?: boolean;
  raw_aggregate?: boolean;
  n_g?: number;
}

export interface RunStarted {
  run_id: string;
  overall: number;
  macro: number;
  report: RunReport;
}

export interface FlagResult {
  flag_id: string;
  job?: GenerationView;
  status?: string;
}

export interface PromptEditResult {
  class_id: string;
  no: number;
  status: string;
  original_text: string;
  replacement_text: string;
}

export interface RegenerateResult {
  parent_id: string;
  replacement_id: string;
  status: string;
}

export class ApiError extends Error {
  status: number;
  detail: unknown;

  constructor(status: number, detail: unknown) {
    super(typeof detail === 'string' ? detail : `request failed (${status})`);
    this.status = status;
    this.detail = detail;
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(path, {
    headers: { 'Content-Type': 'application/json', ...(init?.headers ?? {}) },
    ...init,
  });
  if (!response.ok) {
    let detail: unknown = response.statusText;
    try {
      const body = (await response.json()) as { detail?: unknown };
      if (body && body.detail !== undefined) detail = body.detail;
    } catch {
      // non-JSON error body, keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return response.json() as Promise<T>;
}

const q = encodeURIComponent;

export const api = {
  listDatasets(): Promise<{ datasets: DatasetEntry[] }> {
    return request('/api/datasets');
  },

  listClasses(dataset: string): Promise<{ dataset_id: string; classes: ClassSummary[] }> {
    return request(`/api/datasets/${q(dataset)}/classes`);
  },

  getPrompts(dataset: string, classId: string): Promise<PromptSetView> {
    return request(`/api/classes/${q(classId)}/prompts?dataset=${q(dataset)}`);
  },

  getGenerations(dataset: string, classId: string): Promise<GenerationListing> {
    return request(`/api/classes/${q(classId)}/generations?dataset=${q(dataset)}`);
  },

  getRun(runId: string): Promise<RunView> {
    return request(`/api/runs/${q(runId)}`);
  },

  flagGeneration(
    dataset: string,
    generationId: string,
    category: FlagCategory,
    note?: string,
  ): Promise<FlagResult> {
    return request('/api/flags', {
      method: 'POST',
      body: JSON.stringify({
        dataset,
        generation_id: generationId,
        category,
        note: note ?? null,
      }),
    });
  },

  flagPrompt(
    dataset: string,
    classId: string,
    promptNo: number,
    category: FlagCategory,
    note?: string,
  ): Promise<FlagResult> {
    return request('/api/flags', {
      method: 'POST',
      body: JSON.stringify({
        dataset,
        class_id: classId,
        prompt_no: promptNo,
        category,
        note: note ?? null,
      }),
    });
  },

  clearFlag(flagId: string): Promise<FlagResult> {
    return request(`/api/flags/${flagId}`, { method: 'DELETE' });
  },

  replacePrompt(
    dataset: string,
    classId: string,
    promptNo: number,
    replacementText: string,
  ): Promise<PromptEditResult> {
    return request(`/api/prompts/${q(classId)}/${promptNo}`, {
      method: 'PUT',
      body: JSON.stringify({ dataset, replacement_text: replacementText }),
    });
  },

  regenerate(
    dataset: string,
    generationId: string,
    options?: { newPromptText?: string; newSeed?: number },
  ): Promise<RegenerateResult> {
    return request(`/api/regenerate/${generationId}`, {
      method: 'POST',
      body: JSON.stringify({
        dataset,
        new_prompt_text: options?.newPromptText ?? null,
        new_seed: options?.newSeed ?? null,
      }),
    });
  },

  startRun(body: RunRequest): Promise<RunStarted> {
    return request('/api/runs', { method: 'POST', body: JSON.stringify(body) });
  },
};
