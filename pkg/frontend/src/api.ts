import type { ModelInfo, SessionResponse, TaxonomyResponse } from './types';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function asError(resp: Response): Promise<ApiError> {
  let code = 'unknown';
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    code = body.error ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ApiError(resp.status, code, message);
}

/** Thin client for the /v1 endpoints; fetch is injectable so tests can run
 * against the bundled mock server. */
export class TriageApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, '')}${path}`;
  }

  async openSession(clinical: Blob, filename = 'clinical.png'): Promise<SessionResponse> {
    const form = new FormData();
    form.append('clinical', clinical, filename);
    const resp = await this.fetchImpl(this.url('/v1/sessions'), { method: 'POST', body: form });
    if (resp.status !== 201) throw await asError(resp);
    return resp.json();
  }

  async submitDermoscopic(
    sessionId: string,
    dermoscopic: Blob,
    filename = 'dermoscopic.png',
  ): Promise<SessionResponse> {
    const form = new FormData();
    form.append('dermoscopic', dermoscopic, filename);
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}/dermoscopic`), {
      method: 'POST',
      body: form,
    });
    if (resp.status !== 200) throw await asError(resp);
    return resp.json();
  }

  async taxonomy(): Promise<TaxonomyResponse> {
    const resp = await this.fetchImpl(this.url('/v1/taxonomy'));
    if (!resp.ok) throw await asError(resp);
    return resp.json();
  }

  async model(): Promise<ModelInfo> {
    const resp = await this.fetchImpl(this.url('/v1/model'));
    if (!resp.ok) throw await asError(resp);
    return resp.json();
  }

  async health(): Promise<boolean> {
    try {
      const resp = await this.fetchImpl(this.url('/v1/health'));
      return resp.ok;
    } catch {
      return false;
    }
  }
}
