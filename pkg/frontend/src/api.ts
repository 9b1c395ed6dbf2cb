/** Typed client for the annotation-service HTTP API. */

export interface HealthInfo {
  status: "ready" | "degraded";
  index_size: number;
  inversion_network_loaded: boolean;
  queries_completed: number;
  caption_prefix: string;
}

export interface SessionInfo {
  session_id: string;
  phase: string;
}

export interface ReferenceInfo {
  reference_id: string;
  supercategory: string;
  phase: string;
}

export interface GalleryEntry {
  image_id: string;
  score: number;
}

export interface CandidatesResponse {
  reference_id: string;
  candidates: GalleryEntry[];
  caption_prefix: string;
  guidance: string;
}

export interface TripletResponse {
  triplet_id: string;
  phase: string;
}

export interface GtGalleryEntry extends GalleryEntry {
  is_target: boolean;
}

export interface GtCandidatesResponse {
  triplet_id: string;
  target_id: string;
  semantic_aspects: string[];
  candidates: GtGalleryEntry[];
}

export interface GroundTruthResponse {
  query_id: string;
  phase: string;
  gt_count: number;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, init);
  if (!response.ok) {
    let detail = `${response.status} ${response.statusText}`;
    try {
      const body = await response.json();
      if (typeof body.detail === "string") detail = body.detail;
      else if (body.detail) detail = JSON.stringify(body.detail);
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class AnnotationApi {
  constructor(private baseUrl: string = "") {}

  health(): Promise<HealthInfo> {
    return request(`${this.baseUrl}/health`);
  }

  createSession(): Promise<SessionInfo> {
    return request(`${this.baseUrl}/session`);
  }

  reference(sessionId: string, skip = false): Promise<ReferenceInfo> {
    const params = new URLSearchParams({ session_id: sessionId, skip: String(skip) });
    return request(`${this.baseUrl}/reference?${params}`);
  }

  candidates(referenceId: string, sessionId: string): Promise<CandidatesResponse> {
    const params = new URLSearchParams({ session_id: sessionId });
    return request(`${this.baseUrl}/candidates/${encodeURIComponent(referenceId)}?${params}`);
  }

  submitTriplet(sessionId: string, targetId: string, sharedConcept: string,
                relativeCaption: string): Promise<TripletResponse> {
    return request(`${this.baseUrl}/triplet`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        session_id: sessionId,
        target_id: targetId,
        shared_concept: sharedConcept,
        relative_caption: relativeCaption,
      }),
    });
  }

  gtCandidates(tripletId: string): Promise<GtCandidatesResponse> {
    return request(`${this.baseUrl}/gt-candidates/${encodeURIComponent(tripletId)}`);
  }

  submitGroundTruths(tripletId: string, gtIds: string[], aspects: string[]): Promise<GroundTruthResponse> {
    return request(`${this.baseUrl}/ground-truths`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ triplet_id: tripletId, gt_ids: gtIds, semantic_aspects: aspects }),
    });
  }

  exportDataset(ratio = 0.2, seed = 0): Promise<unknown[]> {
    const params = new URLSearchParams({ ratio: String(ratio), seed: String(seed) });
    return request(`${this.baseUrl}/export?${params}`);
  }

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/images/${encodeURIComponent(imageId)}`;
  }
}
