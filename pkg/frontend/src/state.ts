/** Client-side workflow state and the pure rules the screens depend on.
 *
 * The client never invents image ids: every id in this state was served by
 * the service, and the selection logic only echoes them back.
 */

import type { GalleryEntry, GtGalleryEntry } from "./api.js";

export type Phase = "pair_selection" | "captioning" | "gt_selection";

export const GT_PAGE_SIZE = 30;

export interface UiState {
  phase: Phase;
  sessionId: string;
  busy: boolean;
  error: string | null;

  referenceId: string | null;
  supercategory: string | null;
  candidates: GalleryEntry[];
  captionPrefix: string;
  guidance: string;

  selectedTarget: string | null;
  sharedConcept: string;
  captionContinuation: string;

  tripletId: string | null;
  gtTargetId: string | null;
  gtCandidates: GtGalleryEntry[];
  selectedGts: Set<string>;
  aspects: string[];
  checkedAspects: Set<string>;
  gtPage: number;

  completedCount: number;
}

export function initialState(): UiState {
  return {
    phase: "pair_selection",
    sessionId: "",
    busy: false,
    error: null,
    referenceId: null,
    supercategory: null,
    candidates: [],
    captionPrefix: "",
    guidance: "",
    selectedTarget: null,
    sharedConcept: "",
    captionContinuation: "",
    tripletId: null,
    gtTargetId: null,
    gtCandidates: [],
    selectedGts: new Set(),
    aspects: [],
    checkedAspects: new Set(),
    gtPage: 0,
    completedCount: 0,
  };
}

/** Submit is possible only when the server-side preconditions can hold. */
export function canSubmitTriplet(state: UiState): boolean {
  return (
    state.selectedTarget !== null &&
    state.sharedConcept.trim().length > 0 &&
    state.captionContinuation.trim().length > 0 &&
    !state.busy
  );
}

export function canSubmitGroundTruths(state: UiState): boolean {
  return (
    state.gtTargetId !== null &&
    state.selectedGts.has(state.gtTargetId) &&
    !state.busy
  );
}

/** Toggle a gallery entry; the original target is locked on and cannot be removed. */
export function toggleGroundTruth(state: UiState, imageId: string): void {
  if (imageId === state.gtTargetId) return;
  if (!state.gtCandidates.some((entry) => entry.image_id === imageId)) return;
  if (state.selectedGts.has(imageId)) {
    state.selectedGts.delete(imageId);
  } else {
    state.selectedGts.add(imageId);
  }
}

export function toggleAspect(state: UiState, aspect: string): void {
  if (!state.aspects.includes(aspect)) return;
  if (state.checkedAspects.has(aspect)) {
    state.checkedAspects.delete(aspect);
  } else {
    state.checkedAspects.add(aspect);
  }
}

export function gtPageCount(state: UiState): number {
  return Math.max(1, Math.ceil(state.gtCandidates.length / GT_PAGE_SIZE));
}

export function visibleGtCandidates(state: UiState): GtGalleryEntry[] {
  const start = state.gtPage * GT_PAGE_SIZE;
  return state.gtCandidates.slice(start, start + GT_PAGE_SIZE);
}

export function setGtPage(state: UiState, page: number): void {
  state.gtPage = Math.min(Math.max(page, 0), gtPageCount(state) - 1);
}

/** Ordered payload for POST /ground-truths, target first, server order after. */
export function groundTruthPayload(state: UiState): string[] {
  const ordered: string[] = [];
  for (const entry of state.gtCandidates) {
    if (state.selectedGts.has(entry.image_id)) ordered.push(entry.image_id);
  }
  return ordered;
}

export function resetForNextPair(state: UiState): void {
  state.phase = "pair_selection";
  state.referenceId = null;
  state.supercategory = null;
  state.candidates = [];
  state.selectedTarget = null;
  state.sharedConcept = "";
  state.captionContinuation = "";
  state.tripletId = null;
  state.gtTargetId = null;
  state.gtCandidates = [];
  state.selectedGts = new Set();
  state.checkedAspects = new Set();
  state.gtPage = 0;
  state.error = null;
}
