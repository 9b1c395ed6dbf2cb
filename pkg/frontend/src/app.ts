/** The single-page annotation client: three screens over one state object.
 *
 * The service is the source of truth; each render reflects the last server
 * response, and submits are optimistic only in disabling the controls while
 * a request is in flight.
 */

import { AnnotationApi, ApiError } from "./api.js";
import {
  UiState,
  canSubmitGroundTruths,
  canSubmitTriplet,
  groundTruthPayload,
  gtPageCount,
  initialState,
  resetForNextPair,
  setGtPage,
  toggleAspect,
  toggleGroundTruth,
  visibleGtCandidates,
} from "./state.js";

export class AnnotationApp {
  state: UiState = initialState();

  constructor(private root: HTMLElement, private api: AnnotationApi) {}

  async start(): Promise<void> {
    const session = await this.api.createSession();
    this.state.sessionId = session.session_id;
    await this.loadNextReference(false);
  }

  async loadNextReference(skip: boolean): Promise<void> {
    this.state.busy = true;
    this.render();
    try {
      const ref = await this.api.reference(this.state.sessionId, skip);
      this.state.referenceId = ref.reference_id;
      this.state.supercategory = ref.supercategory;
      const gallery = await this.api.candidates(ref.reference_id, this.state.sessionId);
      this.state.candidates = gallery.candidates;
      this.state.captionPrefix = gallery.caption_prefix;
      this.state.guidance = gallery.guidance;
      this.state.phase = "pair_selection";
      this.state.selectedTarget = null;
      this.state.error = null;
    } catch (err) {
      this.state.error = describeError(err);
    } finally {
      this.state.busy = false;
    }
    this.render();
  }

  async skip(): Promise<void> {
    await this.loadNextReference(true);
  }

  chooseCandidate(imageId: string): void {
    if (!this.state.candidates.some((entry) => entry.image_id === imageId)) return;
    this.state.selectedTarget = imageId;
    this.state.phase = "captioning";
    this.state.error = null;
    this.render();
  }

  setSharedConcept(value: string): void {
    this.state.sharedConcept = value;
    this.render();
  }

  setCaptionContinuation(value: string): void {
    this.state.captionContinuation = value;
    this.render();
  }

  async submitTriplet(): Promise<void> {
    if (!canSubmitTriplet(this.state) || this.state.selectedTarget === null) return;
    this.state.busy = true;
    this.render();
    try {
      const created = await this.api.submitTriplet(
        this.state.sessionId,
        this.state.selectedTarget,
        this.state.sharedConcept.trim(),
        this.state.captionContinuation.trim(),
      );
      this.state.tripletId = created.triplet_id;
      const gallery = await this.api.gtCandidates(created.triplet_id);
      this.state.gtTargetId = gallery.target_id;
      this.state.gtCandidates = gallery.candidates;
      this.state.aspects = gallery.semantic_aspects;
      this.state.selectedGts = new Set([gallery.target_id]);
      this.state.checkedAspects = new Set();
      this.state.gtPage = 0;
      this.state.phase = "gt_selection";
      this.state.error = null;
    } catch (err) {
      this.state.error = describeError(err);
    } finally {
      this.state.busy = false;
    }
    this.render();
  }

  toggleGroundTruth(imageId: string): void {
    toggleGroundTruth(this.state, imageId);
    this.render();
  }

  toggleAspect(aspect: string): void {
    toggleAspect(this.state, aspect);
    this.render();
  }

  goToPage(page: number): void {
    setGtPage(this.state, page);
    this.render();
  }

  async submitGroundTruths(): Promise<void> {
    if (!canSubmitGroundTruths(this.state) || this.state.tripletId === null) return;
    this.state.busy = true;
    this.render();
    try {
      await this.api.submitGroundTruths(
        this.state.tripletId,
        groundTruthPayload(this.state),
        [...this.state.checkedAspects],
      );
      this.state.completedCount += 1;
      resetForNextPair(this.state);
    } catch (err) {
      this.state.error = describeError(err);
      this.state.busy = false;
      this.render();
      return;
    }
    this.state.busy = false;
    await this.loadNextReference(false);
  }

  // -- rendering ----------------------------------------------------------

  render(): void {
    this.root.replaceChildren();
    const header = el("header", {}, [
      el("h1", { text: "Annotation tool" }),
      el("span", { class: "completed", text: `${this.state.completedCount} completed` }),
    ]);
    this.root.appendChild(header);
    if (this.state.error) {
      this.root.appendChild(el("div", { class: "error", role: "alert", text: this.state.error }));
    }
    switch (this.state.phase) {
      case "pair_selection":
        this.root.appendChild(this.renderPairSelection());
        break;
      case "captioning":
        this.root.appendChild(this.renderCaptioning());
        break;
      case "gt_selection":
        this.root.appendChild(this.renderGtSelection());
        break;
    }
  }

  private renderPairSelection(): HTMLElement {
    const screen = el("section", { class: "screen pair-selection" });
    const side = el("div", { class: "reference-pane" });
    if (this.state.referenceId) {
      side.appendChild(el("h2", { text: "Reference" }));
      side.appendChild(imageCard(this.api, this.state.referenceId));
      if (this.state.supercategory) {
        side.appendChild(el("p", { class: "supercategory", text: this.state.supercategory }));
      }
    }
    const skip = el("button", { class: "skip", text: "Skip this reference" }) as HTMLButtonElement;
    skip.disabled = this.state.busy;
    skip.addEventListener("click", () => void this.skip());
    side.appendChild(skip);
    screen.appendChild(side);

    const gallery = el("div", { class: "gallery candidate-gallery" });
    if (this.state.candidates.length === 0) {
      gallery.appendChild(el("p", { class: "empty", text: "No suitable candidates; skip to continue." }));
    }
    for (const entry of this.state.candidates) {
      const card = imageCard(this.api, entry.image_id);
      card.classList.add("clickable");
      card.addEventListener("click", () => this.chooseCandidate(entry.image_id));
      gallery.appendChild(card);
    }
    screen.appendChild(gallery);
    return screen;
  }

  private renderCaptioning(): HTMLElement {
    const screen = el("section", { class: "screen captioning" });
    const pair = el("div", { class: "pair" });
    if (this.state.referenceId) pair.appendChild(imageCard(this.api, this.state.referenceId, "reference"));
    if (this.state.selectedTarget) pair.appendChild(imageCard(this.api, this.state.selectedTarget, "target"));
    screen.appendChild(pair);

    const form = el("form", { class: "caption-form" });
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submitTriplet();
    });

    // fixed, non-editable prefix with the shared-concept slot filled inline
    const prefix = el("p", { class: "caption-prefix" });
    const [before, after] = this.state.captionPrefix.split("{shared concept}");
    prefix.appendChild(el("span", { class: "prefix-text", text: before ?? this.state.captionPrefix }));
    const conceptInput = el("input", {
      class: "shared-concept",
      placeholder: "shared concept",
      value: this.state.sharedConcept,
    }) as HTMLInputElement;
    conceptInput.addEventListener("input", () => this.setSharedConcept(conceptInput.value));
    prefix.appendChild(conceptInput);
    if (after !== undefined) prefix.appendChild(el("span", { class: "prefix-text", text: after }));
    form.appendChild(prefix);

    const continuation = el("textarea", {
      class: "caption-continuation",
      placeholder: "finish the sentence...",
      text: this.state.captionContinuation,
    }) as HTMLTextAreaElement;
    continuation.addEventListener("input", () => this.setCaptionContinuation(continuation.value));
    form.appendChild(continuation);

    form.appendChild(el("p", { class: "guidance", text: this.state.guidance }));

    const submit = el("button", { class: "submit-triplet", text: "Save pair and caption" }) as HTMLButtonElement;
    submit.type = "submit";
    submit.disabled = !canSubmitTriplet(this.state);
    form.appendChild(submit);
    screen.appendChild(form);
    return screen;
  }

  private renderGtSelection(): HTMLElement {
    const screen = el("section", { class: "screen gt-selection" });

    const summary = el("div", { class: "triplet-summary" });
    if (this.state.referenceId) summary.appendChild(imageCard(this.api, this.state.referenceId, "reference"));
    if (this.state.gtTargetId) summary.appendChild(imageCard(this.api, this.state.gtTargetId, "target"));
    summary.appendChild(el("p", {
      class: "caption-echo",
      text: `${this.state.captionPrefix.replace("{shared concept}", this.state.sharedConcept)} ${this.state.captionContinuation}`,
    }));
    screen.appendChild(summary);

    const aspectBox = el("fieldset", { class: "aspects" });
    aspectBox.appendChild(el("legend", { text: "Semantic aspects" }));
    for (const aspect of this.state.aspects) {
      const label = el("label", { class: "aspect" });
      const box = el("input", { type: "checkbox", "data-aspect": aspect }) as HTMLInputElement;
      box.checked = this.state.checkedAspects.has(aspect);
      box.addEventListener("change", () => this.toggleAspect(aspect));
      label.appendChild(box);
      label.appendChild(el("span", { text: aspect }));
      aspectBox.appendChild(label);
    }
    screen.appendChild(aspectBox);

    const gallery = el("div", { class: "gallery gt-gallery" });
    for (const entry of visibleGtCandidates(this.state)) {
      const card = imageCard(this.api, entry.image_id);
      const box = el("input", { type: "checkbox", "data-image": entry.image_id }) as HTMLInputElement;
      box.checked = this.state.selectedGts.has(entry.image_id);
      if (entry.image_id === this.state.gtTargetId) {
        box.disabled = true; // the original target cannot be unchecked
        card.classList.add("locked-target");
      } else {
        box.addEventListener("change", () => this.toggleGroundTruth(entry.image_id));
      }
      card.prepend(box);
      gallery.appendChild(card);
    }
    screen.appendChild(gallery);

    const pager = el("nav", { class: "pager" });
    const pages = gtPageCount(this.state);
    const prev = el("button", { class: "prev", text: "Previous" }) as HTMLButtonElement;
    prev.disabled = this.state.gtPage === 0;
    prev.addEventListener("click", () => this.goToPage(this.state.gtPage - 1));
    const next = el("button", { class: "next", text: "Next" }) as HTMLButtonElement;
    next.disabled = this.state.gtPage >= pages - 1;
    next.addEventListener("click", () => this.goToPage(this.state.gtPage + 1));
    pager.appendChild(prev);
    pager.appendChild(el("span", { class: "page-info", text: `page ${this.state.gtPage + 1} / ${pages}` }));
    pager.appendChild(next);
    screen.appendChild(pager);

    const submit = el("button", { class: "submit-gts", text: "Save ground truths" }) as HTMLButtonElement;
    submit.disabled = !canSubmitGroundTruths(this.state);
    submit.addEventListener("click", () => void this.submitGroundTruths());
    screen.appendChild(submit);
    return screen;
  }
}

function el(tag: string, attrs: Record<string, string> = {}, children: HTMLElement[] = []): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "text") node.textContent = value;
    else if (key === "value") (node as HTMLInputElement).value = value;
    else node.setAttribute(key, value);
  }
  for (const child of children) node.appendChild(child);
  return node;
}

function imageCard(api: AnnotationApi, imageId: string, role?: string): HTMLElement {
  const card = el("figure", { class: "image-card", "data-image-id": imageId });
  const img = el("img", { alt: imageId }) as HTMLImageElement;
  img.src = api.imageUrl(imageId);
  card.appendChild(img);
  card.appendChild(el("figcaption", { text: role ? `${role}: ${imageId}` : imageId }));
  return card;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  if (err instanceof Error) return `request failed: ${err.message}`;
  return String(err);
}
