// Client-side state for the review loop. Everything here mirrors what
// the server last told us plus a thin optimistic overlay for flags that
// are still in flight; reconcile() replaces the overlay with the
// server's answer as soon as it arrives. Accuracy numbers are never
// computed on this side, only copied out of run reports.

import type {
  CalibrationDelta,
  ClassSummary,
  FlagCategory,
  GenerationView,
  PromptSetView,
  RunReport,
} from './api.js';

export interface RunSlot {
  run_id: string;
  report: RunReport;
}

export interface RunPanel {
  backend: string;
  ng: number;
  scales: number;
  busy: boolean;
  uncorrected: RunSlot | null;
  calibrated: RunSlot | null;
  delta: CalibrationDelta | null;
}

export interface AppState {
  datasets: string[];
  dataset: string | null;
  classes: ClassSummary[];
  classId: string | null;
  prompts: PromptSetView | null;
  generations: GenerationView[];
  // cursor for keyboard triage, index into `generations`
  cursor: number;
  // generation_id -> category applied optimistically (null = clearing)
  pending: Record<string, FlagCategory | null>;
  runPanel: RunPanel;
  notice: string | null;
}

export function initialState(): AppState {
  return {
    datasets: [],
    dataset: null,
    classes: [],
    classId: null,
    prompts: null,
    generations: [],
    cursor: 0,
    pending: {},
    runPanel: {
      backend: 'mock',
      ng: 10,
      scales: 3,
      busy: false,
      uncorrected: null,
      calibrated: null,
      delta: null,
    },
    notice: null,
  };
}

/** The flag the UI should display right now: overlay wins until reconciled. */
export function effectiveFlag(state: AppState, gen: GenerationView): FlagCategory | null {
  if (gen.generation_id in state.pending) {
    return state.pending[gen.generation_id] ?? null;
  }
  return gen.flag_category;
}

export function applyOptimisticFlag(
  state: AppState,
  generationId: string,
  category: FlagCategory | null,
): AppState {
  return { ...state, pending: { ...state.pending, [generationId]: category } };
}

/**
 * Fold the server's post-mutation job back into the list and drop the
 * overlay entry. The flag response carries the job without its
 * image_url, so the previously known URL is kept.
 */
export function reconcileFlag(
  state: AppState,
  generationId: string,
  job: GenerationView,
): AppState {
  const pending = { ...state.pending };
  delete pending[generationId];
  const generations = state.generations.map((g) =>
    g.generation_id === generationId
      ? { ...job, image_url: job.image_url ?? g.image_url }
      : g,
  );
  return { ...state, pending, generations };
}

/** Drop the overlay without folding anything in (the request failed). */
export function rollbackFlag(state: AppState, generationId: string): AppState {
  const pending = { ...state.pending };
  delete pending[generationId];
  return { ...state, pending };
}

export function moveCursor(state: AppState, step: number): AppState {
  if (state.generations.length === 0) return { ...state, cursor: 0 };
  const max = state.generations.length - 1;
  const cursor = Math.min(max, Math.max(0, state.cursor + step));
  return { ...state, cursor };
}

export function currentItem(state: AppState): GenerationView | null {
  return state.generations[state.cursor] ?? null;
}

export type TriageAction =
  | 'approve'
  | 'flag_wrong'
  | 'flag_composition'
  | 'next'
  | 'prev';

const KEYMAP: Record<string, TriageAction> = {
  a: 'approve',
  w: 'flag_wrong',
  c: 'flag_composition',
  j: 'next',
  ' ': 'next',
  ArrowRight: 'next',
  k: 'prev',
  ArrowLeft: 'prev',
};

/** Reviewers hold one hand on the keyboard; see the legend in the footer. */
export function triageAction(key: string): TriageAction | null {
  return KEYMAP[key] ?? null;
}

/**
 * Ids to flag for a whole-class sweep. Items already showing the
 * requested category are skipped so the sweep is idempotent; failed
 * and superseded generations are not worth flagging.
 */
export function bulkFlagTargets(state: AppState, category: FlagCategory): string[] {
  return state.generations
    .filter((g) => g.status === 'done' || g.status === 'flagged')
    .filter((g) => effectiveFlag(state, g) !== category)
    .map((g) => g.generation_id);
}

export interface ImpactBadge {
  classId: string;
  before: number | null;
  after: number | null;
}

/**
 * Prototype-impact badges pair the source_count of the uncorrected run
 * with the calibrated one, straight from the two reports. Without runs
 * there is nothing to show; counts are never derived client-side.
 */
export function impactBadges(panel: RunPanel): ImpactBadge[] {
  const before = panel.uncorrected?.report.prototypes ?? {};
  const after = panel.calibrated?.report.prototypes ?? {};
  const ids = new Set([...Object.keys(before), ...Object.keys(after)]);
  return [...ids].sort().map((classId) => ({
    classId,
    before: before[classId]?.source_count ?? null,
    after: after[classId]?.source_count ?? null,
  }));
}
