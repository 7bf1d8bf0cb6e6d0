import type { Decision, SessionResponse } from './types';
import type { FetchLike } from './api';

/** Fixture decisions + an in-memory /v1 implementation, so the console test
 * suite runs without the model service built. The handlers mirror the real
 * service's status codes: 201/200 on success, 400 undecodable, 404 unknown
 * session, 409 duplicate dermoscopic. */

export const FIXTURE_THRESHOLDS = { t_ood: 0.42, t_triage: 1.3 };

export function fixtureDecision(overrides: Partial<Decision> = {}): Decision {
  return {
    pred_l1: 'benign',
    pred_l2: 'melanocytic',
    pred_l3: 'common_nevus',
    conf_l1: 0.97,
    conf_l2: 0.91,
    conf_l3: 0.88,
    ood_alert: false,
    triage_recommended: false,
    min_proto_distance: 0.4,
    thresholds_used: FIXTURE_THRESHOLDS,
    modality_used: 'clinical',
    hierarchy_consistent: true,
    ...overrides,
  };
}

export const SCENARIOS: Record<string, { clinical: Decision; combined: Decision }> = {
  confident: {
    clinical: fixtureDecision(),
    combined: fixtureDecision({ modality_used: 'combined', conf_l3: 0.95 }),
  },
  triage: {
    clinical: fixtureDecision({
      pred_l3: 'dermal_nevus',
      conf_l3: 0.55,
      min_proto_distance: 2.4,
      triage_recommended: true,
    }),
    combined: fixtureDecision({
      pred_l3: 'junctional_nevus',
      conf_l3: 0.9,
      min_proto_distance: 0.5,
      modality_used: 'combined',
      hierarchy_consistent: true,
    }),
  },
  ood: {
    clinical: fixtureDecision({
      pred_l3: 'solar_lentigo',
      conf_l1: 0.71,
      conf_l2: 0.48,
      conf_l3: 0.21,
      ood_alert: true,
      triage_recommended: true,
      min_proto_distance: 4.8,
      hierarchy_consistent: false,
    }),
    combined: fixtureDecision({
      pred_l3: 'solar_lentigo',
      conf_l3: 0.3,
      ood_alert: true,
      triage_recommended: true,
      modality_used: 'combined',
    }),
  },
};

export interface MockServerOptions {
  scenario?: keyof typeof SCENARIOS;
  /** Fail the next N requests with a network error (for retry tests). */
  failNextRequests?: number;
}

interface StoredSession {
  clinical: Decision;
  combined: Decision | null;
  scenario: keyof typeof SCENARIOS;
}

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'content-type': 'application/json' },
  });
}

export function createMockServer(options: MockServerOptions = {}) {
  const sessions = new Map<string, StoredSession>();
  let counter = 0;
  const state = { failNextRequests: options.failNextRequests ?? 0 };
  const scenario = options.scenario ?? 'confident';

  const handler: FetchLike = async (input, init) => {
    if (state.failNextRequests > 0) {
      state.failNextRequests -= 1;
      throw new TypeError('network failure (mock)');
    }
    const url = new URL(input, 'http://mock.local');
    const method = (init?.method ?? 'GET').toUpperCase();

    if (method === 'POST' && url.pathname === '/v1/sessions') {
      const form = init?.body as FormData;
      const file = form?.get('clinical');
      if (!file || !(file instanceof Blob) || file.size === 0) {
        return json(400, { error: 'undecodable', message: 'missing or empty clinical upload' });
      }
      const id = `mock-${counter++}`;
      sessions.set(id, { clinical: SCENARIOS[scenario].clinical, combined: null, scenario });
      const body: SessionResponse = {
        session_id: id,
        status: 'awaiting_decision',
        decision: SCENARIOS[scenario].clinical,
      };
      return json(201, body);
    }

    const match = url.pathname.match(/^\/v1\/sessions\/([^/]+)\/dermoscopic$/);
    if (method === 'POST' && match) {
      const session = sessions.get(match[1]);
      if (!session) return json(404, { error: 'unknown_session', message: 'no such session' });
      if (session.combined)
        return json(409, { error: 'duplicate', message: 'already submitted' });
      const form = init?.body as FormData;
      const file = form?.get('dermoscopic');
      if (!file || !(file instanceof Blob) || file.size === 0) {
        return json(400, { error: 'undecodable', message: 'missing or empty dermoscopic upload' });
      }
      session.combined = SCENARIOS[session.scenario].combined;
      const body: SessionResponse = {
        session_id: match[1],
        status: 'complete',
        decision: session.clinical,
        combined: session.combined,
      };
      return json(200, body);
    }

    if (method === 'GET' && url.pathname === '/v1/taxonomy') {
      return json(200, {
        level1: ['benign', 'malignant'],
        level2: [
          { name: 'melanocytic', parent: 'benign' },
          { name: 'keratinocytic', parent: 'benign' },
          { name: 'melanoma', parent: 'malignant' },
          { name: 'bcc', parent: 'malignant' },
        ],
        level3: [
          { name: 'common_nevus', parent: 'melanocytic', id: true },
          { name: 'dermal_nevus', parent: 'melanocytic', id: true },
          { name: 'junctional_nevus', parent: 'melanocytic', id: true },
          { name: 'solar_lentigo', parent: 'keratinocytic', id: true },
          { name: 'halo_nevus', parent: 'melanocytic', id: false },
        ],
      });
    }

    if (method === 'GET' && url.pathname === '/v1/model') {
      return json(200, {
        variant: 'hierarchical_mpl',
        modalities: ['clinical', 'dermoscopic', 'multimodal'],
        image_size: 64,
        checkpoint_digest: 'mock',
        thresholds: FIXTURE_THRESHOLDS,
      });
    }

    if (method === 'GET' && url.pathname === '/v1/health') {
      return json(200, { status: 'ok', uptime_s: 1.0 });
    }

    return json(404, { error: 'not_found', message: url.pathname });
  };

  return { fetch: handler, sessions, state };
}
