/** Latest-wins frame fetching: at most one request in flight, one pending. */

export class FrameLoop<T, R> {
  private inflight: Promise<void> | null = null;
  private pending: T | null = null;
  private counter = 0;

  constructor(
    private fetcher: (params: T) => Promise<R>,
    private present: (result: R, params: T) => void,
    private onError: (err: unknown) => void = () => {},
  ) {}

  /** Request a frame; intermediate requests are coalesced to the newest. */
  request(params: T): void {
    if (this.inflight) {
      this.pending = params; // overwrite: only the latest matters
      return;
    }
    this.launch(params);
  }

  get inFlight(): boolean {
    return this.inflight !== null;
  }

  private launch(params: T): void {
    const ticket = ++this.counter;
    this.inflight = this.fetcher(params)
      .then((result) => {
        if (ticket === this.counter) this.present(result, params);
      })
      .catch((err) => this.onError(err))
      .then(() => {
        this.inflight = null;
        if (this.pending !== null) {
          const next = this.pending;
          this.pending = null;
          this.launch(next);
        }
      });
  }
}
